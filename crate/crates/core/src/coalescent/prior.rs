use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::CoalescentTree;
use crate::error::{Error, Result};

/// Number of lineage pairs among `n` lineages, `C(n, 2)`.
pub fn pair_count(n: usize) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Log density of the inter-event durations under the K-coalescent,
/// `Σ_i [log C(K-i+1, 2) - C(K-i+1, 2) δ_i]`. The uniform topology term is
/// constant in K and left out.
pub fn coalescent_log_prior(tree: &CoalescentTree) -> Result<f64> {
    let k = tree.num_leaves();
    if k < 2 {
        return Err(Error::InvalidTree("the coalescent prior needs at least two leaves".into()));
    }
    let mut total = 0.0;
    for (i, delta) in tree.durations().into_iter().enumerate() {
        if !(delta > 0.0) {
            return Err(Error::InvalidTree(format!("duration {} is not positive ({delta})", i + 1)));
        }
        let rate = pair_count(k - i);
        total += rate.ln() - rate * delta;
    }
    Ok(total)
}

/// Draws a tree from the K-coalescent: while `n` lineages remain, wait
/// `Exp(C(n, 2))` and merge a uniformly chosen pair.
pub fn sample_coalescent<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<CoalescentTree> {
    if k < 2 {
        return Err(Error::invalid("sample_coalescent needs at least two leaves"));
    }
    let mut active: Vec<usize> = (0..k).collect();
    let mut merges = Vec::with_capacity(k - 1);
    let mut t = 0.0;
    for event in 0..k - 1 {
        let n = active.len();
        let exp = Exp::new(pair_count(n)).map_err(|e| Error::invalid(e.to_string()))?;
        t -= exp.sample(rng);
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        merges.push((active[lo], active[hi], t));
        active.swap_remove(hi);
        active.swap_remove(lo);
        active.push(k + event);
    }
    CoalescentTree::from_merges(k, &merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_leaves_unit_duration() {
        let t = CoalescentTree::from_merges(2, &[(0, 1, -1.0)]).unwrap();
        assert!((coalescent_log_prior(&t).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_leaves_hand_value() {
        let t = CoalescentTree::from_merges(3, &[(0, 1, -0.5), (3, 2, -2.5)]).unwrap();
        let expected = 3f64.ln() - 1.5 - 2.0;
        assert!((coalescent_log_prior(&t).unwrap() - expected).abs() < 1e-14);
        assert!((expected + 2.4014).abs() < 1e-4);
    }

    #[test]
    fn single_leaf_rejected() {
        assert!(coalescent_log_prior(&CoalescentTree::single_leaf()).is_err());
    }

    #[test]
    fn samples_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 2..12 {
            let t = sample_coalescent(k, &mut rng).unwrap();
            t.validate().unwrap();
            assert_eq!(t.num_leaves(), k);
        }
        assert!(sample_coalescent(1, &mut rng).is_err());
    }
}

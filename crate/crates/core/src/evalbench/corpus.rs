//! Multi-task corpora in a sparse line format.
//!
//! Each example is one line, `task_id label idx:val ...`, with 1-based
//! feature indices. Labels are `+1`/`-1` for classification or reals for
//! regression. Lines starting with `#` are comments, except for three
//! directives: `# dim: D`, `# kind: da|mtl` and `# labels: classification|regression`.
//! Without `# dim:` the width is the largest index seen; without `# labels:`
//! a corpus whose labels are all ±1 is read as classification.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{SparseRows, TaskDataset, TaskKind};

/// Whether the tasks share a prediction problem (`Da`) or only an input
/// distribution (`Mtl`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CorpusKind {
    #[default]
    Da,
    Mtl,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Da => "da",
            CorpusKind::Mtl => "mtl",
        })
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "da" => Ok(CorpusKind::Da),
            "mtl" => Ok(CorpusKind::Mtl),
            other => Err(Error::invalid(format!("unknown corpus kind '{other}' (expected da or mtl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskCorpus {
    pub tasks: Vec<TaskDataset>,
    pub names: Vec<String>,
    pub dim: usize,
    pub kind: CorpusKind,
}

impl MultiTaskCorpus {
    /// Validates that there is at least one task, that names and tasks line
    /// up, and that all tasks share a width and a label kind. Task indices
    /// are renumbered to positions.
    pub fn new(mut tasks: Vec<TaskDataset>, names: Vec<String>, kind: CorpusKind) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::data(None, "no tasks"))?;
        if names.len() != tasks.len() {
            return Err(Error::Dimension { expected: tasks.len(), got: names.len() });
        }
        let (dim, label_kind) = (first.dim(), first.kind);
        for t in &tasks {
            if t.dim() != dim {
                return Err(Error::data(None, format!("inconsistent feature dimension: {} vs {dim}", t.dim())));
            }
            if t.kind != label_kind {
                return Err(Error::data(None, "tasks mix classification and regression labels"));
            }
        }
        for (k, t) in tasks.iter_mut().enumerate() {
            t.task = k;
        }
        Ok(MultiTaskCorpus { tasks, names, dim, kind })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn label_kind(&self) -> TaskKind {
        self.tasks[0].kind
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Same names and kind with new task data (e.g. a train split).
    pub fn with_tasks(&self, tasks: Vec<TaskDataset>) -> Result<Self> {
        MultiTaskCorpus::new(tasks, self.names.clone(), self.kind)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<MultiTaskCorpus> {
    let f = File::open(path.as_ref()).map_err(|e| Error::data(None, format!("{}: {e}", path.as_ref().display())))?;
    read_corpus(BufReader::new(f))
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &MultiTaskCorpus) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_corpus(&mut out, corpus)?;
    out.flush()?;
    Ok(())
}

struct Row {
    task: usize,
    label: f64,
    features: Vec<(usize, f64)>,
}

fn parse_number(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .replace('\u{2212}', "-")
        .parse()
        .map_err(|_| Error::data(Some(line), format!("bad {what} '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::data(Some(line), format!("{what} '{tok}' is not finite")));
    }
    Ok(v)
}

pub fn read_corpus<B: BufRead>(input: B) -> Result<MultiTaskCorpus> {
    let mut dim: Option<usize> = None;
    let mut kind = CorpusKind::Da;
    let mut labels: Option<TaskKind> = None;
    let mut names: Vec<String> = Vec::new();
    let mut rows: Vec<Row> = Vec::new();
    let mut max_index = 0;

    for (i, line) in input.lines().enumerate() {
        let no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "dim" => dim = Some(value.parse().map_err(|_| Error::data(Some(no), format!("bad dimension '{value}'")))?),
                    "kind" => kind = value.parse().map_err(|e: Error| Error::data(Some(no), e.to_string()))?,
                    "labels" => {
                        labels = Some(match value {
                            "classification" => TaskKind::Classification,
                            "regression" => TaskKind::Regression,
                            _ => return Err(Error::data(Some(no), format!("unknown label kind '{value}'"))),
                        })
                    }
                    _ => {}
                }
            }
            continue;
        }
        let mut toks = line.split_whitespace();
        let name = toks.next().expect("non-empty line has a token");
        let label_tok = toks.next().ok_or_else(|| Error::data(Some(no), "missing label"))?;
        let label = parse_number(label_tok, no, "label")?;
        let mut features = Vec::new();
        for tok in toks {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::data(Some(no), format!("expected idx:val, got '{tok}'")))?;
            let idx: usize = idx.parse().map_err(|_| Error::data(Some(no), format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(Error::data(Some(no), "feature indices are 1-based"));
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(Error::data(Some(no), format!("feature {idx} exceeds declared dimension {d}")));
                }
            }
            max_index = max_index.max(idx);
            features.push((idx - 1, parse_number(val, no, "feature value")?));
        }
        features.sort_by_key(|&(i, _)| i);
        if let Some(w) = features.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::data(Some(no), format!("feature {} repeated", w[0].0 + 1)));
        }
        let task = match names.iter().position(|n| n == name) {
            Some(k) => k,
            None => {
                names.push(name.to_string());
                names.len() - 1
            }
        };
        rows.push(Row { task, label, features });
    }

    if names.is_empty() {
        return Err(Error::data(None, "no tasks"));
    }
    let dim = match dim {
        Some(d) if d < max_index => return Err(Error::data(None, format!("feature {max_index} exceeds declared dimension {d}"))),
        Some(d) => d,
        None => max_index,
    };
    let label_kind = labels.unwrap_or(if rows.iter().all(|r| r.label == 1.0 || r.label == -1.0) {
        TaskKind::Classification
    } else {
        TaskKind::Regression
    });

    let mut xs: Vec<SparseRows> = (0..names.len()).map(|_| SparseRows::new(dim)).collect();
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for r in &rows {
        xs[r.task].push_row(&r.features)?;
        ys[r.task].push(r.label);
    }
    let tasks = xs
        .into_iter()
        .zip(ys)
        .enumerate()
        .map(|(k, (x, y))| TaskDataset::new(x, y, label_kind, k))
        .collect::<Result<Vec<_>>>()?;
    MultiTaskCorpus::new(tasks, names, kind)
}

/// Writes the directives and then every task's examples in task order.
pub fn write_corpus<W: Write>(out: &mut W, corpus: &MultiTaskCorpus) -> Result<()> {
    writeln!(out, "# dim: {}", corpus.dim)?;
    writeln!(out, "# kind: {}", corpus.kind)?;
    let labels = match corpus.label_kind() {
        TaskKind::Classification => "classification",
        TaskKind::Regression => "regression",
    };
    writeln!(out, "# labels: {labels}")?;
    for (t, name) in corpus.tasks.iter().zip(&corpus.names) {
        for r in 0..t.len() {
            write!(out, "{name} {}", t.y[r])?;
            for (i, v) in t.x.row(r) {
                write!(out, " {}:{v}", i + 1)?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

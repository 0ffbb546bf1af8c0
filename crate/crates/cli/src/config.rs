//! Plain-text `key = value` config files. Flags override file values, which
//! override defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Blank lines and `#` comments are skipped; keys may use `-` or `_`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: '{key}' set twice", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get_str(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Config(format!("config key '{key}': {e}"))))
            .transpose()
    }

    /// Fails on any key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(CliError::Config(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }
}

/// Flag, then config file, then default.
pub fn resolve<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let c = ConfigFile::parse("# run\nsigma2 = 0.5\nmax-iters=3 # trailing\n\n").unwrap();
        assert_eq!(c.get::<f64>("sigma2").unwrap(), Some(0.5));
        assert_eq!(c.get::<usize>("max_iters").unwrap(), Some(3));
        assert_eq!(c.get::<usize>("seed").unwrap(), None);
    }

    #[test]
    fn precedence() {
        let c = ConfigFile::parse("seed = 4").unwrap();
        assert_eq!(resolve(Some(9u64), &c, "seed", 0).unwrap(), 9);
        assert_eq!(resolve(None, &c, "seed", 0u64).unwrap(), 4);
        assert_eq!(resolve(None, &c, "iters", 20usize).unwrap(), 20);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConfigFile::parse("novalue").is_err());
        assert!(ConfigFile::parse("a=1\na=2").is_err());
        assert!(ConfigFile::parse("seed = x").unwrap().get::<u64>("seed").is_err());
        assert!(ConfigFile::parse("colour = red").unwrap().check_keys(&["seed"]).is_err());
    }
}

//! Plain `key = value` configuration files.
//!
//! Keys are long flag names without the dashes; `-` and `_` are
//! interchangeable. `#` starts a comment. A flag given on the command line
//! wins over the file. Keys that no option reads are reported as errors so
//! typos do not pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Settings::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            let key = normalize(k);
            if key.is_empty() {
                bail!("line {}: empty key", no + 1);
            }
            if values.insert(key.clone(), (v.trim().to_string(), no + 1)).is_some() {
                bail!("line {}: duplicate key '{key}'", no + 1);
            }
        }
        Ok(Settings { values, used: RefCell::default() })
    }

    /// The flag value when given, else the file value.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = normalize(key);
        let file = self.values.get(&key);
        if file.is_some() {
            self.used.borrow_mut().insert(key.clone());
        }
        if flag.is_some() {
            return Ok(flag);
        }
        match file {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config line {line}: invalid value '{v}' for {key}: {e}")),
        }
    }

    pub fn pick_or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Switches: on when the flag is present, else the file's `true`/`false`.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(self.pick(flag.then_some(true), key)?.unwrap_or(false))
    }

    /// Fails on keys no option asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.values.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        Ok(())
    }
}

/// Comma-separated values, e.g. `--x x1,x2,x3`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T> FromStr for List<T>
where
    T: FromStr,
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        if items.is_empty() {
            return Err("empty list".into());
        }
        items.into_iter().map(|p| p.parse().map_err(|e| format!("'{p}': {e}"))).collect::<Result<_, _>>().map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let s = Settings::parse("n0 = 500 # comment\nshuffle-seed=3\n\n# only a comment\n").unwrap();
        assert_eq!(s.pick::<usize>(None, "n0").unwrap(), Some(500));
        assert_eq!(s.pick(Some(7usize), "n0").unwrap(), Some(7));
        assert_eq!(s.pick::<u64>(None, "shuffle_seed").unwrap(), Some(3));
        assert_eq!(s.pick::<u64>(None, "epochs").unwrap(), None);
        s.finish().unwrap();
    }

    #[test]
    fn bad_lines_and_unknown_keys_are_errors() {
        assert!(Settings::parse("n0 500").is_err());
        assert!(Settings::parse("n0 = 1\nn0 = 2").is_err());
        let s = Settings::parse("n0 = abc\ntypo = 1").unwrap();
        assert!(s.pick::<usize>(None, "n0").is_err());
        assert!(s.finish().unwrap_err().to_string().contains("typo"));
    }

    #[test]
    fn switches_and_lists() {
        let s = Settings::parse("jtest = true").unwrap();
        assert!(s.switch(false, "jtest").unwrap());
        assert!(!s.switch(false, "plug_in").unwrap());
        assert_eq!("1, 2,3".parse::<List<u32>>().unwrap(), List(vec![1, 2, 3]));
        assert!("1,a".parse::<List<u32>>().is_err());
        assert!("".parse::<List<u32>>().is_err());
    }
}

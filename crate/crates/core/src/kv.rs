//! The `key = value` text format shared by profile, schema and experiment
//! config files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored; keys
//! and values are trimmed. Keys may contain spaces and dots
//! (`freq.Heart Rate = 1.15`). Later duplicates override earlier ones for
//! [`KvFile::get`], while [`KvFile::entries`] keeps every line in order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("{file}:{line}: expected `key = value`, got {text:?}")]
    Syntax { file: String, line: usize, text: String },
    #[error("{file}: missing key `{key}`")]
    Missing { file: String, key: String },
    #[error("{file}: key `{key}` has invalid value {value:?}")]
    Invalid { file: String, key: String, value: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    name: String,
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new(name: impl Into<String>) -> Self {
        KvFile {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn parse(name: &str, text: &str) -> Result<Self, KvError> {
        let mut file = KvFile::new(name);
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    file: name.to_string(),
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    file: name.to_string(),
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            file.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::Missing {
            file: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.invalid(key, v)),
        }
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| self.invalid(key, v))
    }

    pub fn invalid(&self, key: &str, value: &str) -> KvError {
        KvError::Invalid {
            file: self.name.clone(),
            key: key.to_string(),
            value: value.to_string(),
        }
    }

    /// Keys starting with `prefix`, with the prefix stripped, in file order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v.as_str())))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_spaces_and_overrides() {
        let f = KvFile::parse(
            "t",
            "# header\nname = South\nfreq.Heart Rate = 1.1086  # trailing\n\nname = West\n",
        )
        .unwrap();
        assert_eq!(f.get("name"), Some("West"));
        assert_eq!(f.parse_required::<f64>("freq.Heart Rate").unwrap(), 1.1086);
        let freqs: Vec<_> = f.with_prefix("freq.").collect();
        assert_eq!(freqs, vec![("Heart Rate", "1.1086")]);
    }

    #[test]
    fn reports_line_of_bad_syntax() {
        let err = KvFile::parse("cfg", "a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, KvError::Syntax { line: 2, .. }));
        let f = KvFile::parse("cfg", "seeds = five").unwrap();
        assert!(matches!(f.parse_required::<u32>("seeds"), Err(KvError::Invalid { .. })));
        assert!(matches!(f.require("task"), Err(KvError::Missing { .. })));
    }

    #[test]
    fn render_round_trips() {
        let mut f = KvFile::new("x");
        f.set("a", "1");
        f.set("b c", "two words");
        assert_eq!(KvFile::parse("x", &f.render()).unwrap().entries(), f.entries());
    }
}

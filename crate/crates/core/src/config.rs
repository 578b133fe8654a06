//! Flat `key = value` configuration text with `[section]` headers.
//!
//! ```text
//! [train]
//! lr = 0.1          # comments run to end of line
//! milestones = 80,120,160
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::error::{QbitError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn error(&self, key: &str, message: impl Into<String>) -> QbitError {
        let line = self.get(key).map_or(self.line, |e| e.line);
        QbitError::Config {
            line,
            field: format!("{}.{}", self.name, key),
            message: message.into(),
        }
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| self.error(key, format!("cannot parse `{}`: {err}", e.value))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| self.error(key, "missing required field"))
    }

    /// Comma-separated list; empty value gives an empty list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|err| self.error(key, format!("cannot parse `{s}`: {err}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(QbitError::Config {
                line: e.line,
                field: format!("{}.{}", self.name, e.key),
                message: "unknown field".into(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    pub sections: Vec<Section>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| QbitError::Config {
                    line,
                    field: content.to_string(),
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim().to_string();
                if sections.iter().any(|s| s.name == name) {
                    return Err(QbitError::Config {
                        line,
                        field: name,
                        message: "duplicate section".into(),
                    });
                }
                sections.push(Section {
                    name,
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| QbitError::Config {
                line,
                field: content.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let section = sections.last_mut().ok_or_else(|| QbitError::Config {
                line,
                field: key.trim().to_string(),
                message: "entry outside any [section]".into(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(QbitError::Config {
                    line,
                    field: section.name.clone(),
                    message: "empty key".into(),
                });
            }
            if section.get(&key).is_some() {
                return Err(QbitError::Config {
                    line,
                    field: format!("{}.{}", section.name, key),
                    message: "duplicate key".into(),
                });
            }
            section.entries.push(Entry {
                key,
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require_section(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| QbitError::Config {
            line: 0,
            field: name.to_string(),
            message: "missing section".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = ConfigFile::parse("# head\n[train]\nlr = 0.1 # rate\n\n[data]\nkind=mnist-idx\n").unwrap();
        let train = cfg.section("train").unwrap();
        assert_eq!(train.get("lr").unwrap().value, "0.1");
        assert_eq!(train.get("lr").unwrap().line, 3);
        assert_eq!(cfg.section("data").unwrap().get("kind").unwrap().value, "mnist-idx");
    }

    #[test]
    fn errors_carry_line_and_field() {
        let err = ConfigFile::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        match err {
            QbitError::Config { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "a.x");
            }
            e => panic!("{e:?}"),
        }
        assert!(ConfigFile::parse("x = 1\n").is_err());
        assert!(ConfigFile::parse("[a\n").is_err());
        let cfg = ConfigFile::parse("[t]\nlr = fast\n").unwrap();
        match cfg.section("t").unwrap().parse::<f64>("lr").unwrap_err() {
            QbitError::Config { line, field, .. } => {
                assert_eq!((line, field.as_str()), (2, "t.lr"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn lists() {
        let cfg = ConfigFile::parse("[t]\nm = 80, 120,160\nempty =\n").unwrap();
        let t = cfg.section("t").unwrap();
        assert_eq!(t.parse_list::<usize>("m").unwrap().unwrap(), vec![80, 120, 160]);
        assert!(t.parse_list::<usize>("empty").unwrap().unwrap().is_empty());
        assert!(t.parse_list::<usize>("none").unwrap().is_none());
    }
}

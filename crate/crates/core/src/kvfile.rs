//! Sectioned key-value text format used by model files and run configs.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! vector_key = 0.0 0.1 0.2
//! ```
//!
//! Sections may repeat; their order is preserved. Keys inside one section
//! must be unique. Values are the trimmed remainder of the line after `=`.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;

use crate::error::FormatError;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<(String, String, usize)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, l)| *l)
            .unwrap_or(self.line)
    }

    /// Rejects any key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), FormatError> {
        for (k, _, line) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(FormatError::UnknownKey {
                    section: self.name.clone(),
                    key: k.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key).ok_or_else(|| FormatError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
            line: self.line,
        })
    }

    fn bad(&self, key: &str, reason: impl Into<String>) -> FormatError {
        FormatError::BadValue {
            section: self.name.clone(),
            key: key.to_string(),
            line: self.line_of(key),
            reason: reason.into(),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, FormatError> {
        let raw = self.require(key)?;
        raw.parse::<f64>()
            .map_err(|_| self.bad(key, format!("expected a number, got `{raw}`")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, FormatError> {
        match self.get(key) {
            Some(_) => self.f64(key),
            None => Ok(default),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, FormatError> {
        let raw = self.require(key)?;
        raw.parse::<usize>()
            .map_err(|_| self.bad(key, format!("expected a non-negative integer, got `{raw}`")))
    }

    pub fn u64(&self, key: &str) -> Result<u64, FormatError> {
        let raw = self.require(key)?;
        raw.parse::<u64>()
            .map_err(|_| self.bad(key, format!("expected a non-negative integer, got `{raw}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool, FormatError> {
        match self.require(key)? {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(self.bad(key, format!("expected a boolean, got `{other}`"))),
        }
    }

    pub fn vec(&self, key: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| self.bad(key, format!("expected numbers, got `{tok}`")))
            })
            .collect()
    }

    pub fn vec_n<const N: usize>(&self, key: &str) -> Result<[f64; N], FormatError> {
        let v = self.vec(key)?;
        v.as_slice()
            .try_into()
            .map_err(|_| self.bad(key, format!("expected {N} numbers, got {}", v.len())))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, FormatError> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| self.bad(key, format!("expected integers, got `{tok}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut sections: Vec<Section> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(FormatError::Syntax {
                    line: lineno,
                    reason: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(FormatError::Syntax {
                        line: lineno,
                        reason: format!("invalid section name `{name}`"),
                    });
                }
                sections.push(Section {
                    name: name.to_string(),
                    line: lineno,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(FormatError::Syntax {
                line: lineno,
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(FormatError::Syntax {
                    line: lineno,
                    reason: "empty key".into(),
                });
            }
            let section = sections.last_mut().ok_or(FormatError::Syntax {
                line: lineno,
                reason: "key outside of any section".into(),
            })?;
            if section.get(key).is_some() {
                return Err(FormatError::DuplicateKey {
                    section: section.name.clone(),
                    key: key.to_string(),
                    line: lineno,
                });
            }
            section
                .entries
                .push((key.to_string(), value.trim().to_string(), lineno));
        }
        Ok(Self { sections })
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, v, _) in &s.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Formats floats so that parsing the text yields the identical `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn fmt_vec(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

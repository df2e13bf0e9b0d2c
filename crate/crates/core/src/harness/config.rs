//! Sectioned `key = value` text files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (ignored, as are blank lines)
//! [section]            (starts a section; names are [A-Za-z0-9_-]+)
//! key = value          (key is trimmed; value is trimmed and may contain '=')
//! ```
//!
//! Lines before the first section header belong to the section `""`. A
//! section may also hold free-form rows, read back with [`Document::rows`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    sections: Vec<(String, Vec<String>)>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document {
            sections: vec![(String::new(), Vec::new())],
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .filter(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
                    .ok_or_else(|| Error::format(format!("line {}: bad section header '{line}'", n + 1)))?;
                if doc.sections.iter().any(|(s, _)| s == name) {
                    return Err(Error::format(format!("line {}: section [{name}] repeated", n + 1)));
                }
                doc.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            doc.sections.last_mut().expect("root section").1.push(line.to_string());
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Document::parse(&text)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(s, _)| s == name)
    }

    /// Raw non-comment lines of a section; empty if the section is absent.
    pub fn rows(&self, section: &str) -> &[String] {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .map(|(_, rows)| rows.as_slice())
            .unwrap_or(&[])
    }

    /// The `key = value` pairs of a section.
    pub fn pairs(&self, section: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for row in self.rows(section) {
            let (k, v) = row
                .split_once('=')
                .ok_or_else(|| Error::format(format!("[{section}]: expected 'key = value', got '{row}'")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(format!("[{section}]: empty key in '{row}'")));
            }
            if out.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::format(format!("[{section}]: key '{k}' repeated")));
            }
        }
        Ok(out)
    }
}

/// Render pairs as a section.
pub fn write_section(out: &mut String, name: &str, pairs: &[(String, String)]) {
    out.push_str(&format!("[{name}]\n"));
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
}

//! Minimal INI reader shared by the experiment and plot configuration files.
//!
//! Sections are `[name]` lines, entries are `name = value`. Lines starting with
//! `#` or `;` are comments. Section and entry order is preserved, and every item
//! remembers its 1-based line number for error reporting.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IniEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IniSection {
    pub name: String,
    pub line: usize,
    pub entries: Vec<IniEntry>,
}

impl IniSection {
    pub fn get(&self, key: &str) -> Option<&IniEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct IniError {
    pub line: usize,
    pub message: String,
}

pub fn parse_ini(text: &str) -> Result<Vec<IniSection>, IniError> {
    let mut sections: Vec<IniSection> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        let err = |message: String| IniError { line, message };
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{trimmed}`")))?
                .trim();
            if name.is_empty() {
                return Err(err("empty section name".into()));
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(err(format!("duplicate section `[{name}]`")));
            }
            sections.push(IniSection {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| err(format!("expected `name = value`, found `{trimmed}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| err(format!("entry `{key}` appears before any section")))?;
        if section.get(key).is_some() {
            return Err(err(format!("duplicate key `{key}` in `[{}]`", section.name)));
        }
        section.entries.push(IniEntry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(sections)
}

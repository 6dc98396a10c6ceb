//! Line-oriented fixture records: `key=value key2="quoted value"`.
//!
//! Blank lines and lines starting with `#` are skipped. Quoted values may
//! contain `\"` and `\\`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Record {
    pub line: usize,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, RecordError> {
        self.get(key).ok_or_else(|| RecordError {
            line: self.line,
            reason: format!("missing field `{key}`"),
        })
    }
}

pub fn parse_records(text: &str) -> Result<Vec<Record>, RecordError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = parse_line(line).map_err(|reason| RecordError {
            line: i + 1,
            reason,
        })?;
        out.push(Record {
            line: i + 1,
            fields,
        });
    }
    Ok(out)
}

fn parse_line(line: &str) -> Result<Vec<(String, String)>, String> {
    let mut fields: Vec<(String, String)> = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(c) = chars.next_if(|c| *c != '=' && !c.is_whitespace()) {
            key.push(c);
        }
        if chars.next() != Some('=') || key.is_empty() {
            return Err(format!("expected key=value near `{key}`"));
        }
        let mut value = String::new();
        if chars.next_if_eq(&'"').is_some() {
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(c @ ('"' | '\\')) => value.push(c),
                        other => return Err(format!("bad escape `\\{}`", other.unwrap_or(' '))),
                    },
                    Some(c) => value.push(c),
                    None => return Err(format!("unterminated quote in `{key}`")),
                }
            }
            if chars.peek().is_some_and(|c| !c.is_whitespace()) {
                return Err(format!("expected whitespace after value of `{key}`"));
            }
        } else {
            while let Some(c) = chars.next_if(|c| !c.is_whitespace()) {
                value.push(c);
            }
        }
        if fields.iter().any(|(k, _)| *k == key) {
            return Err(format!("duplicate field `{key}`"));
        }
        fields.push((key, value));
    }
    Ok(fields)
}

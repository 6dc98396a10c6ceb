//! Template expressions evaluated against an exchange.
//!
//! Text outside `${...}` is literal. A placeholder starts from one of the
//! roots `body`, `bodyAs(String)`, `id`, `header.NAME` (or `headers.NAME`)
//! and may be followed by `.split("SEP")`, `[i]` and `.size` accessors:
//!
//! ```text
//! ${headers.receiver.split("__")[0]}
//! check_relevance(${header.id}, "${header.from}")
//! ${body.size}
//! ```

use std::fmt;

use thiserror::Error;

use crate::message::{BodyValue, Exchange};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("expression syntax error at byte {position}: {reason}")]
    Syntax { position: usize, reason: String },
    #[error("missing header `{0}`")]
    MissingHeader(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cannot apply {op} to {found}")]
    TypeMismatch {
        op: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Root {
    Body,
    BodyAsString,
    Id,
    /// `plural` records whether the source spelled `headers.` or `header.`.
    Header {
        name: String,
        plural: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Accessor {
    Split(String),
    Index(usize),
    Size,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub root: Root,
    pub accessors: Vec<Accessor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expr {
    segments: Vec<Segment>,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        parse_expr(text)
    }

    /// A fixed text value, never interpreted.
    pub fn constant(text: impl Into<String>) -> Self {
        Expr {
            segments: vec![Segment::Literal(text.into())],
        }
    }

    pub fn body() -> Self {
        Self::placeholder(Root::Body)
    }

    pub fn id() -> Self {
        Self::placeholder(Root::Id)
    }

    pub fn header(name: impl Into<String>) -> Self {
        Self::placeholder(Root::Header {
            name: name.into(),
            plural: false,
        })
    }

    fn placeholder(root: Root) -> Self {
        Expr {
            segments: vec![Segment::Placeholder(Placeholder {
                root,
                accessors: Vec::new(),
            })],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn eval(&self, x: &Exchange) -> Result<BodyValue, ExprError> {
        eval(self, x)
    }

    /// Evaluates and renders the value as text.
    pub fn eval_text(&self, x: &Exchange) -> Result<String, ExprError> {
        self.eval(x).map(|v| v.to_text())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => f.write_str(s)?,
                Segment::Placeholder(p) => write!(f, "${{{p}}}")?,
            }
        }
        Ok(())
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.root {
            Root::Body => f.write_str("body")?,
            Root::BodyAsString => f.write_str("bodyAs(String)")?,
            Root::Id => f.write_str("id")?,
            Root::Header { name, plural } => {
                write!(f, "{}.{name}", if *plural { "headers" } else { "header" })?
            }
        }
        for acc in &self.accessors {
            match acc {
                Accessor::Split(sep) => {
                    let escaped = sep.replace('\\', "\\\\").replace('"', "\\\"");
                    write!(f, ".split(\"{escaped}\")")?
                }
                Accessor::Index(i) => write!(f, "[{i}]")?,
                Accessor::Size => f.write_str(".size")?,
            }
        }
        Ok(())
    }
}

pub fn parse_expr(text: &str) -> Result<Expr, ExprError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(start) = rest.find("${") {
        literal.push_str(&rest[..start]);
        let body_start = start + 2;
        let end = find_close(&rest[body_start..]).ok_or_else(|| ExprError::Syntax {
            position: offset + start,
            reason: "unterminated `${`".into(),
        })?;
        let inner = &rest[body_start..body_start + end];
        let placeholder = parse_placeholder(inner, offset + body_start)?;
        if !literal.is_empty() {
            segments.push(Segment::Literal(std::mem::take(&mut literal)));
        }
        segments.push(Segment::Placeholder(placeholder));
        let consumed = body_start + end + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    literal.push_str(rest);
    if !literal.is_empty() || segments.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(Expr { segments })
}

/// Byte offset of the `}` closing a placeholder, skipping quoted strings.
fn find_close(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut in_quote = false;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if in_quote => i += 1,
            b'"' => in_quote = !in_quote,
            b'}' if !in_quote => return Some(i),
            _ => {}
        }
        i += 1;
    }
    None
}

fn parse_placeholder(inner: &str, base: usize) -> Result<Placeholder, ExprError> {
    let err = |at: usize, reason: String| ExprError::Syntax {
        position: base + at,
        reason,
    };
    let (root, mut pos) = if let Some(r) = inner.strip_prefix("bodyAs(String)") {
        (Root::BodyAsString, inner.len() - r.len())
    } else if let Some(r) = inner
        .strip_prefix("headers.")
        .or_else(|| inner.strip_prefix("header."))
    {
        let plural = inner.starts_with("headers.");
        let start = inner.len() - r.len();
        let len = header_name_len(r);
        if len == 0 {
            return Err(err(start, "empty header name".into()));
        }
        (
            Root::Header {
                name: r[..len].to_owned(),
                plural,
            },
            start + len,
        )
    } else if inner.starts_with("body") && at_boundary(&inner[4..]) {
        (Root::Body, 4)
    } else if inner.starts_with("id") && at_boundary(&inner[2..]) {
        (Root::Id, 2)
    } else {
        return Err(err(0, format!("unknown root in `{inner}`")));
    };

    let mut accessors = Vec::new();
    while pos < inner.len() {
        let rest = &inner[pos..];
        if let Some(r) = rest.strip_prefix(".split(\"") {
            let (sep, used) =
                read_quoted(r).ok_or_else(|| err(pos, "unterminated split separator".into()))?;
            let after = &r[used..];
            if !after.starts_with(')') {
                return Err(err(pos, "expected `)` after split separator".into()));
            }
            if sep.is_empty() {
                return Err(err(pos, "empty split separator".into()));
            }
            accessors.push(Accessor::Split(sep));
            pos += ".split(\"".len() + used + 1;
        } else if let Some(r) = rest.strip_prefix('[') {
            let close = r
                .find(']')
                .ok_or_else(|| err(pos, "unterminated index".into()))?;
            let index = r[..close]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(pos, format!("invalid index `{}`", &r[..close])))?;
            accessors.push(Accessor::Index(index));
            pos += close + 2;
        } else if rest.starts_with(".size") && at_boundary(&rest[5..]) {
            accessors.push(Accessor::Size);
            pos += 5;
        } else {
            return Err(err(pos, format!("unknown accessor `{rest}`")));
        }
    }
    Ok(Placeholder { root, accessors })
}

fn at_boundary(rest: &str) -> bool {
    rest.is_empty() || rest.starts_with('.') || rest.starts_with('[')
}

/// Header names run until an index or a recognised accessor.
fn header_name_len(s: &str) -> usize {
    let mut i = 0;
    while i < s.len() {
        let rest = &s[i..];
        if rest.starts_with('[')
            || rest.starts_with(".split(")
            || (rest.starts_with(".size") && at_boundary(&rest[5..]))
        {
            break;
        }
        i += rest.chars().next().map_or(1, char::len_utf8);
    }
    i
}

/// Reads up to an unescaped `"`, returning the unescaped text and the bytes
/// consumed including the closing quote.
fn read_quoted(s: &str) -> Option<(String, usize)> {
    let mut out = String::new();
    let mut chars = s.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Some((out, i + 1)),
            '\\' => match chars.next() {
                Some((_, n @ ('"' | '\\'))) => out.push(n),
                Some((_, n)) => {
                    out.push('\\');
                    out.push(n);
                }
                None => return None,
            },
            c => out.push(c),
        }
    }
    None
}

fn kind(v: &BodyValue) -> &'static str {
    match v {
        BodyValue::Text(_) => "text",
        BodyValue::Number(_) => "number",
        BodyValue::ListOf(_) => "list",
        BodyValue::RowSet(_) => "row set",
        BodyValue::Empty => "empty body",
    }
}

fn eval_placeholder(p: &Placeholder, x: &Exchange) -> Result<BodyValue, ExprError> {
    let mut value = match &p.root {
        Root::Body => x.body().clone(),
        Root::BodyAsString => BodyValue::Text(x.body().to_text()),
        Root::Id => BodyValue::Text(x.id().to_string()),
        Root::Header { name, .. } => x
            .header(name)
            .cloned()
            .ok_or_else(|| ExprError::MissingHeader(name.clone()))?,
    };
    for acc in &p.accessors {
        value = match (acc, value) {
            (Accessor::Split(sep), BodyValue::Text(s)) => BodyValue::texts(s.split(sep.as_str())),
            (Accessor::Split(_), other) => {
                return Err(ExprError::TypeMismatch {
                    op: "split",
                    found: kind(&other),
                })
            }
            (Accessor::Index(i), BodyValue::ListOf(items)) => {
                let len = items.len();
                items
                    .into_iter()
                    .nth(*i)
                    .ok_or(ExprError::IndexOutOfRange { index: *i, len })?
            }
            (Accessor::Index(i), BodyValue::RowSet(rs)) => {
                let row = rs.rows().nth(*i).ok_or(ExprError::IndexOutOfRange {
                    index: *i,
                    len: rs.len(),
                })?;
                BodyValue::texts(row.iter().cloned())
            }
            (Accessor::Index(_), other) => {
                return Err(ExprError::TypeMismatch {
                    op: "index",
                    found: kind(&other),
                })
            }
            (Accessor::Size, BodyValue::ListOf(items)) => BodyValue::Number(items.len() as f64),
            (Accessor::Size, BodyValue::RowSet(rs)) => BodyValue::Number(rs.len() as f64),
            (Accessor::Size, other) => {
                return Err(ExprError::TypeMismatch {
                    op: "size",
                    found: kind(&other),
                })
            }
        };
    }
    Ok(value)
}

/// A lone placeholder yields its typed value; anything else is rendered
/// to text.
pub fn eval(e: &Expr, x: &Exchange) -> Result<BodyValue, ExprError> {
    if let [Segment::Placeholder(p)] = e.segments.as_slice() {
        return eval_placeholder(p, x);
    }
    let mut out = String::new();
    for seg in &e.segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Placeholder(p) => out.push_str(&eval_placeholder(p, x)?.to_text()),
        }
    }
    Ok(BodyValue::Text(out))
}

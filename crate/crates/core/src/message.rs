//! Exchanges, messages and endpoint URIs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::LazyLock;
use std::time::{SystemTime, UNIX_EPOCH};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use thiserror::Error;

use crate::term::{format_number, Term};

/// A tabular result: every row has exactly the columns in `columns`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RowSet {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl RowSet {
    pub fn new(columns: Vec<String>) -> Self {
        RowSet {
            columns,
            rows: Vec::new(),
        }
    }

    /// Appends a row; `None` when the row width does not match the columns.
    pub fn push(&mut self, row: Vec<String>) -> Option<()> {
        (row.len() == self.columns.len()).then(|| self.rows.push(row))
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[String]> {
        self.rows.iter().map(Vec::as_slice)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        let col = self.column_index(column)?;
        self.rows.get(row).map(|r| r[col].as_str())
    }

    /// Row `i` as a column → value map.
    pub fn row_map(&self, i: usize) -> Option<BTreeMap<String, String>> {
        self.rows.get(i).map(|r| {
            self.columns
                .iter()
                .cloned()
                .zip(r.iter().cloned())
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum BodyValue {
    Text(String),
    Number(f64),
    ListOf(Vec<BodyValue>),
    RowSet(RowSet),
    #[default]
    Empty,
}

impl BodyValue {
    pub fn text(s: impl Into<String>) -> Self {
        BodyValue::Text(s.into())
    }

    pub fn texts<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        BodyValue::ListOf(
            items
                .into_iter()
                .map(|s| BodyValue::Text(s.into()))
                .collect(),
        )
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            BodyValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, BodyValue::Empty)
    }

    /// Converts to an agent term. Text becomes a quoted string, rows become
    /// lists of quoted cells.
    pub fn to_term(&self) -> Term {
        match self {
            BodyValue::Text(s) => Term::Str(s.clone()),
            BodyValue::Number(n) => Term::Number(*n),
            BodyValue::ListOf(items) => Term::List(items.iter().map(BodyValue::to_term).collect()),
            BodyValue::RowSet(rs) => Term::List(
                rs.rows()
                    .map(|r| Term::List(r.iter().cloned().map(Term::Str).collect()))
                    .collect(),
            ),
            BodyValue::Empty => Term::Str(String::new()),
        }
    }

    /// Inverse of [`BodyValue::to_term`] for the value-like terms.
    pub fn from_term(term: &Term) -> Self {
        match term {
            Term::Str(s) => BodyValue::Text(s.clone()),
            Term::Number(n) => BodyValue::Number(*n),
            Term::List(items) => {
                BodyValue::ListOf(items.iter().map(BodyValue::from_term).collect())
            }
            other => BodyValue::Text(other.to_string()),
        }
    }

    /// Text rendering used by `bodyAs(String)` and text interpolation.
    /// Top-level text is verbatim; collections render in term syntax.
    pub fn to_text(&self) -> String {
        match self {
            BodyValue::Text(s) => s.clone(),
            BodyValue::Number(n) => format_number(*n),
            BodyValue::Empty => String::new(),
            other => other.to_term().to_string(),
        }
    }
}

impl fmt::Display for BodyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl From<&str> for BodyValue {
    fn from(s: &str) -> Self {
        BodyValue::Text(s.to_owned())
    }
}

impl From<String> for BodyValue {
    fn from(s: String) -> Self {
        BodyValue::Text(s)
    }
}

impl From<f64> for BodyValue {
    fn from(n: f64) -> Self {
        BodyValue::Number(n)
    }
}

impl From<RowSet> for BodyValue {
    fn from(rs: RowSet) -> Self {
        BodyValue::RowSet(rs)
    }
}

pub type Headers = BTreeMap<String, BodyValue>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    pub headers: Headers,
    pub body: BodyValue,
}

impl Message {
    pub fn new(body: BodyValue) -> Self {
        Message {
            headers: Headers::new(),
            body,
        }
    }

    pub fn header(&self, name: &str) -> Option<&BodyValue> {
        self.headers.get(name)
    }

    pub fn header_text(&self, name: &str) -> Option<String> {
        self.headers.get(name).map(BodyValue::to_text)
    }

    pub fn set_header(&mut self, name: impl Into<String>, value: impl Into<BodyValue>) {
        let name = name.into();
        debug_assert!(!name.is_empty(), "header names are non-empty");
        self.headers.insert(name, value.into());
    }

    pub fn remove_header(&mut self, name: &str) -> Option<BodyValue> {
        self.headers.remove(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExchangePattern {
    InOnly,
    InOut,
}

impl std::str::FromStr for ExchangePattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "InOnly" => Ok(ExchangePattern::InOnly),
            "InOut" => Ok(ExchangePattern::InOut),
            other => Err(format!("unknown exchange pattern `{other}`")),
        }
    }
}

static PROCESS_TOKEN: LazyLock<String> = LazyLock::new(|| {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!("{:x}{:x}", std::process::id(), nanos & 0xffff_ffff)
});
static EXCHANGE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Exchange identifier: `ID-<process token>-<counter>`. Contains no `:`
/// so it can be embedded in `:`-separated route payloads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExchangeId(String);

impl ExchangeId {
    pub fn next() -> Self {
        let n = EXCHANGE_COUNTER.fetch_add(1, Ordering::Relaxed);
        ExchangeId(format!("ID-{}-{n}", *PROCESS_TOKEN))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExchangeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    id: ExchangeId,
    pattern: ExchangePattern,
    pub in_msg: Message,
    out_msg: Option<Message>,
}

impl Exchange {
    pub fn new(pattern: ExchangePattern, body: BodyValue, headers: Headers) -> Self {
        Exchange {
            id: ExchangeId::next(),
            pattern,
            in_msg: Message { headers, body },
            out_msg: None,
        }
    }

    pub fn in_only(body: impl Into<BodyValue>) -> Self {
        Self::new(ExchangePattern::InOnly, body.into(), Headers::new())
    }

    pub fn in_out(body: impl Into<BodyValue>) -> Self {
        Self::new(ExchangePattern::InOut, body.into(), Headers::new())
    }

    /// A new exchange (fresh id) carrying a copy of this one's message.
    pub fn derive(&self, pattern: ExchangePattern) -> Self {
        Self::new(
            pattern,
            self.in_msg.body.clone(),
            self.in_msg.headers.clone(),
        )
    }

    pub fn id(&self) -> &ExchangeId {
        &self.id
    }

    pub fn pattern(&self) -> ExchangePattern {
        self.pattern
    }

    pub fn set_pattern(&mut self, pattern: ExchangePattern) {
        self.pattern = pattern;
        if pattern == ExchangePattern::InOnly {
            self.out_msg = None;
        }
    }

    pub fn out_msg(&self) -> Option<&Message> {
        self.out_msg.as_ref()
    }

    /// Sets the reply message; ignored on `InOnly` exchanges.
    pub fn set_out(&mut self, msg: Message) -> bool {
        if self.pattern == ExchangePattern::InOut {
            self.out_msg = Some(msg);
            true
        } else {
            false
        }
    }

    pub fn body(&self) -> &BodyValue {
        &self.in_msg.body
    }

    pub fn set_body(&mut self, body: impl Into<BodyValue>) {
        self.in_msg.body = body.into();
    }

    pub fn header(&self, name: &str) -> Option<&BodyValue> {
        self.in_msg.header(name)
    }

    pub fn set_header(&mut self, name: impl Into<String>, value: impl Into<BodyValue>) {
        self.in_msg.set_header(name, value);
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<BodyValue>) -> Self {
        self.set_header(name, value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed uri `{uri}`: {reason}")]
pub struct MalformedUri {
    pub uri: String,
    pub reason: String,
}

/// `scheme:path?k1=v1&k2=v2` with an ordered parameter multimap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointUri {
    pub scheme: String,
    pub path: String,
    params: Vec<(String, String)>,
}

const PARAM_ENCODE: &AsciiSet = &CONTROLS
    .add(b'&')
    .add(b'=')
    .add(b'?')
    .add(b'%')
    .add(b'#')
    .add(b' ');

impl EndpointUri {
    pub fn new(scheme: impl Into<String>, path: impl Into<String>) -> Self {
        EndpointUri {
            scheme: scheme.into(),
            path: path.into(),
            params: Vec::new(),
        }
    }

    pub fn with_param(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.push((name.into(), value.into()));
        self
    }

    pub fn parse(text: &str) -> Result<Self, MalformedUri> {
        let bad = |reason: &str| MalformedUri {
            uri: text.to_owned(),
            reason: reason.to_owned(),
        };
        let (scheme, rest) = text.split_once(':').ok_or_else(|| bad("missing scheme"))?;
        if scheme.is_empty()
            || !scheme.starts_with(|c: char| c.is_ascii_alphabetic())
            || !scheme
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
        {
            return Err(bad("invalid scheme"));
        }
        let (path, query) = match rest.split_once('?') {
            Some((p, q)) => (p, Some(q)),
            None => (rest, None),
        };
        let mut params = Vec::new();
        for pair in query
            .into_iter()
            .flat_map(|q| q.split('&'))
            .filter(|p| !p.is_empty())
        {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            let decode = |s: &str| {
                percent_decode_str(s)
                    .decode_utf8()
                    .map(|c| c.into_owned())
                    .map_err(|_| bad("invalid percent-encoding"))
            };
            let key = decode(k)?;
            if key.is_empty() {
                return Err(bad("empty parameter name"));
            }
            params.push((key, decode(v)?));
        }
        Ok(EndpointUri {
            scheme: scheme.to_owned(),
            path: path.to_owned(),
            params,
        })
    }

    pub fn params(&self) -> &[(String, String)] {
        &self.params
    }

    /// First value of `name`.
    pub fn param(&self, name: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn param_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params
            .iter()
            .filter(move |(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn param_bool(&self, name: &str) -> Option<bool> {
        self.param(name).map(|v| v.eq_ignore_ascii_case("true"))
    }

    /// `scheme:path` without parameters, used as an endpoint key.
    pub fn base(&self) -> String {
        format!("{}:{}", self.scheme, self.path)
    }
}

impl fmt::Display for EndpointUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme, self.path)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            let sep = if i == 0 { '?' } else { '&' };
            write!(
                f,
                "{sep}{}={}",
                utf8_percent_encode(k, PARAM_ENCODE),
                utf8_percent_encode(v, PARAM_ENCODE)
            )?;
        }
        Ok(())
    }
}

impl std::str::FromStr for EndpointUri {
    type Err = MalformedUri;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EndpointUri::parse(s)
    }
}

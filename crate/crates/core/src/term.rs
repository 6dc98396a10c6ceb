//! Agent-level terms: atoms, numbers, strings, variables, lists and
//! compounds with an optional trailing annotation list.
//!
//! The text form is a small subset of AgentSpeak term syntax:
//!
//! ```text
//! foo                     atom
//! -3.5                    number
//! "a \"quoted\" string"   string
//! Accounts                variable
//! [a, "b", 3]             list
//! p(1, X)[source(self)]   compound with annotations
//! ```

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermError {
    #[error("syntax error at byte {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("argument {index} is not a variable")]
    NotAVariable { index: usize },
    #[error("argument index {index} out of range for arity {arity}")]
    IndexOutOfRange { index: usize, arity: usize },
    #[error("`{0}` is not a literal (atom or compound)")]
    NotALiteral(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Atom(String),
    Number(f64),
    Str(String),
    Var(String),
    List(Vec<Term>),
    /// Invariant: `args` and `annotations` are never both empty; that
    /// shape is an [`Term::Atom`].
    Compound {
        functor: String,
        args: Vec<Term>,
        annotations: Vec<Term>,
    },
}

impl Term {
    pub fn atom(name: impl Into<String>) -> Self {
        Term::Atom(name.into())
    }

    pub fn string(text: impl Into<String>) -> Self {
        Term::Str(text.into())
    }

    pub fn var(name: impl Into<String>) -> Self {
        Term::Var(name.into())
    }

    /// Builds a compound, collapsing the zero-argument case to an atom.
    pub fn compound(functor: impl Into<String>, args: Vec<Term>) -> Self {
        Self::annotated(functor, args, Vec::new())
    }

    pub fn annotated(functor: impl Into<String>, args: Vec<Term>, annotations: Vec<Term>) -> Self {
        let functor = functor.into();
        if args.is_empty() && annotations.is_empty() {
            Term::Atom(functor)
        } else {
            Term::Compound {
                functor,
                args,
                annotations,
            }
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Term::Atom(_) | Term::Compound { .. })
    }

    /// `(functor, arity)` for literals.
    pub fn functor_arity(&self) -> Option<(&str, usize)> {
        match self {
            Term::Atom(name) => Some((name, 0)),
            Term::Compound { functor, args, .. } => Some((functor, args.len())),
            _ => None,
        }
    }

    pub fn args(&self) -> &[Term] {
        match self {
            Term::Compound { args, .. } => args,
            _ => &[],
        }
    }

    pub fn annotations(&self) -> &[Term] {
        match self {
            Term::Compound { annotations, .. } => annotations,
            _ => &[],
        }
    }

    /// Appends annotations to a literal. Non-literals are returned unchanged.
    pub fn with_annotations(self, extra: impl IntoIterator<Item = Term>) -> Self {
        match self {
            Term::Atom(functor) => {
                Term::annotated(functor, Vec::new(), extra.into_iter().collect())
            }
            Term::Compound {
                functor,
                args,
                mut annotations,
            } => {
                annotations.extend(extra);
                Term::annotated(functor, args, annotations)
            }
            other => other,
        }
    }

    /// The literal with its annotation list removed.
    pub fn without_annotations(&self) -> Term {
        match self {
            Term::Compound { functor, args, .. } => Term::compound(functor.clone(), args.clone()),
            other => other.clone(),
        }
    }

    /// Plain text view used when a term stands for a value: strings lose
    /// their quotes, everything else renders canonically.
    pub fn as_text(&self) -> String {
        match self {
            Term::Str(s) => s.clone(),
            other => other.to_string(),
        }
    }

    pub fn is_ground(&self) -> bool {
        self.variables().is_empty()
    }

    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Term::Var(name) => {
                out.insert(name.clone());
            }
            Term::List(items) => items.iter().for_each(|t| t.collect_vars(out)),
            Term::Compound {
                args, annotations, ..
            } => {
                args.iter().for_each(|t| t.collect_vars(out));
                annotations.iter().for_each(|t| t.collect_vars(out));
            }
            _ => {}
        }
    }

    /// Replaces every occurrence of variable `name` by `value`.
    pub fn substitute(&self, name: &str, value: &Term) -> Term {
        match self {
            Term::Var(v) if v == name => value.clone(),
            Term::List(items) => {
                Term::List(items.iter().map(|t| t.substitute(name, value)).collect())
            }
            Term::Compound {
                functor,
                args,
                annotations,
            } => Term::Compound {
                functor: functor.clone(),
                args: args.iter().map(|t| t.substitute(name, value)).collect(),
                annotations: annotations
                    .iter()
                    .map(|t| t.substitute(name, value))
                    .collect(),
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(name) | Term::Var(name) => f.write_str(name),
            Term::Number(n) => write_number(f, *n),
            Term::Str(s) => write_quoted(f, s),
            Term::List(items) => {
                f.write_str("[")?;
                write_joined(f, items)?;
                f.write_str("]")
            }
            Term::Compound {
                functor,
                args,
                annotations,
            } => {
                f.write_str(functor)?;
                if !args.is_empty() {
                    f.write_str("(")?;
                    write_joined(f, args)?;
                    f.write_str(")")?;
                }
                if !annotations.is_empty() {
                    f.write_str("[")?;
                    write_joined(f, annotations)?;
                    f.write_str("]")?;
                }
                Ok(())
            }
        }
    }
}

fn write_joined(f: &mut fmt::Formatter<'_>, items: &[Term]) -> fmt::Result {
    for (i, t) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

fn write_number(f: &mut fmt::Formatter<'_>, n: f64) -> fmt::Result {
    if n.is_finite() && n.fract() == 0.0 && n.abs() < 1e15 {
        write!(f, "{}", n as i64)
    } else {
        write!(f, "{n}")
    }
}

/// Renders `s` as a double-quoted term string.
pub fn quote(s: &str) -> String {
    Term::Str(s.to_owned()).to_string()
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// Renders a number the same way terms do; shared with body stringification.
pub fn format_number(n: f64) -> String {
    Term::Number(n).to_string()
}

pub fn parse_term(text: &str) -> Result<Term, TermError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    let t = p.term()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("end of input"));
    }
    Ok(t)
}

/// Parses text that must denote a literal (atom or compound).
pub fn parse_literal(text: &str) -> Result<Term, TermError> {
    let t = parse_term(text)?;
    if t.is_literal() {
        Ok(t)
    } else {
        Err(TermError::NotALiteral(text.to_owned()))
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, expected: &str) -> TermError {
        TermError::Syntax {
            position: self.pos,
            expected: expected.to_owned(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn term(&mut self) -> Result<Term, TermError> {
        match self.peek() {
            None => Err(self.error("a term")),
            Some(b'"') => self.string().map(Term::Str),
            Some(b'[') => {
                self.pos += 1;
                self.sequence(b']').map(Term::List)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(b'-') if self.src.get(self.pos + 1).is_some_and(u8::is_ascii_digit) => {
                self.number()
            }
            Some(c) if c.is_ascii_uppercase() || c == b'_' => Ok(Term::Var(self.identifier())),
            Some(c) if c.is_ascii_lowercase() => self.literal(),
            Some(_) => Err(self.error("a term")),
        }
    }

    fn identifier(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn literal(&mut self) -> Result<Term, TermError> {
        let functor = self.identifier();
        let args = if self.eat(b'(') {
            let args = self.sequence(b')')?;
            if args.is_empty() {
                return Err(self.error("an argument"));
            }
            args
        } else {
            Vec::new()
        };
        let annotations = if self.eat(b'[') {
            self.sequence(b']')?
        } else {
            Vec::new()
        };
        Ok(Term::annotated(functor, args, annotations))
    }

    /// Comma-separated terms up to `close`; the opening bracket is consumed.
    fn sequence(&mut self, close: u8) -> Result<Vec<Term>, TermError> {
        let mut items = Vec::new();
        self.skip_ws();
        if self.eat(close) {
            return Ok(items);
        }
        loop {
            self.skip_ws();
            items.push(self.term()?);
            self.skip_ws();
            if self.eat(b',') {
                continue;
            }
            if self.eat(close) {
                return Ok(items);
            }
            let expected = if close == b')' {
                "',' or ')'"
            } else {
                "',' or ']'"
            };
            return Err(self.error(expected));
        }
    }

    fn number(&mut self) -> Result<Term, TermError> {
        let start = self.pos;
        self.eat(b'-');
        self.digits();
        if self.peek() == Some(b'.') && self.src.get(self.pos + 1).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
            self.digits();
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.digits();
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        text.parse::<f64>()
            .map(Term::Number)
            .map_err(|_| TermError::Syntax {
                position: start,
                expected: "a number".into(),
            })
    }

    fn digits(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
    }

    fn string(&mut self) -> Result<String, TermError> {
        self.pos += 1;
        let mut bytes = Vec::new();
        loop {
            match self.peek() {
                None => return Err(self.error("closing '\"'")),
                Some(b'"') => {
                    self.pos += 1;
                    break;
                }
                Some(b'\\') if matches!(self.src.get(self.pos + 1), Some(b'"' | b'\\')) => {
                    bytes.push(self.src[self.pos + 1]);
                    self.pos += 2;
                }
                Some(c) => {
                    bytes.push(c);
                    self.pos += 1;
                }
            }
        }
        String::from_utf8(bytes).map_err(|_| self.error("valid UTF-8"))
    }
}

/// An action literal as performed by an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTerm {
    literal: Term,
}

impl ActionTerm {
    pub fn new(literal: Term) -> Result<Self, TermError> {
        if literal.is_literal() {
            Ok(ActionTerm { literal })
        } else {
            Err(TermError::NotALiteral(literal.to_string()))
        }
    }

    pub fn parse(text: &str) -> Result<Self, TermError> {
        Self::new(parse_term(text)?)
    }

    pub fn literal(&self) -> &Term {
        &self.literal
    }

    pub fn into_literal(self) -> Term {
        self.literal
    }

    pub fn name(&self) -> &str {
        self.literal
            .functor_arity()
            .map(|(f, _)| f)
            .unwrap_or_default()
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        self.literal.variables()
    }

    /// Binds the variable at 1-based argument `index` to `value`, replacing
    /// every occurrence of that variable in the term.
    pub fn bind_argument(&self, index: usize, value: &Term) -> Result<ActionTerm, TermError> {
        let args = self.literal.args();
        if index == 0 || index > args.len() {
            return Err(TermError::IndexOutOfRange {
                index,
                arity: args.len(),
            });
        }
        match &args[index - 1] {
            Term::Var(name) => Ok(ActionTerm {
                literal: self.literal.substitute(name, value),
            }),
            _ => Err(TermError::NotAVariable { index }),
        }
    }
}

impl fmt::Display for ActionTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.literal.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> Term {
        Term::string(x)
    }

    #[test]
    fn atom_base_case() {
        assert_eq!(parse_term("foo").unwrap(), Term::atom("foo"));
    }

    #[test]
    fn agents_list_of_strings() {
        let t = parse_term(r#"agents(["c-1__a","c-1__b"])"#).unwrap();
        assert_eq!(
            t,
            Term::compound("agents", vec![Term::List(vec![s("c-1__a"), s("c-1__b")])])
        );
    }

    #[test]
    fn check_relevance_has_arity_four() {
        let t = parse_term(r#"check_relevance(42, "bob@x", "hi", "text")"#).unwrap();
        assert_eq!(t.functor_arity(), Some(("check_relevance", 4)));
        assert_eq!(t.args()[0], Term::Number(42.0));
        assert_eq!(t.args()[3], s("text"));
    }

    #[test]
    fn render_examples() {
        assert_eq!(Term::atom("ok").to_string(), "ok");
        let p = Term::annotated("p", vec![Term::Number(1.0)], vec![Term::atom("a")]);
        assert_eq!(p.to_string(), "p(1)[a]");
        assert_eq!(parse_term("p(1)[a]").unwrap(), p);
        assert_eq!(Term::List(vec![s("a@x")]).to_string(), r#"["a@x"]"#);
    }

    #[test]
    fn annotated_atom() {
        let t = parse_term("tick[source(percept)]").unwrap();
        assert_eq!(t.functor_arity(), Some(("tick", 0)));
        assert_eq!(t.annotations().len(), 1);
        assert_eq!(t.to_string(), "tick[source(percept)]");
        assert_eq!(parse_term("tick[]").unwrap(), Term::atom("tick"));
    }

    #[test]
    fn escaped_quotes_round_trip() {
        let t = parse_term(r#"say("he said \"hi\"")"#).unwrap();
        assert_eq!(t.args()[0], s(r#"he said "hi""#));
        assert_eq!(parse_term(&t.to_string()).unwrap(), t);
        let back = Term::string(r"C:\dir\");
        assert_eq!(parse_term(&back.to_string()).unwrap(), back);
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_term("-3.25").unwrap(), Term::Number(-3.25));
        assert_eq!(parse_term("1e3").unwrap(), Term::Number(1000.0));
        assert_eq!(Term::Number(0.1).to_string(), "0.1");
        assert_eq!(Term::Number(-7.0).to_string(), "-7");
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_term("p(a,") {
            Err(TermError::Syntax { position, .. }) => assert_eq!(position, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_term("p()").is_err());
        assert!(parse_term("\"open").is_err());
        assert!(parse_term("a b").is_err());
        assert!(parse_term("").is_err());
        assert!(parse_term("Foo(a)").is_err());
    }

    #[test]
    fn whitespace_is_normalized() {
        let t = parse_term(" p( a , [ 1 ,2 ] ) ").unwrap();
        assert_eq!(t.to_string(), "p(a,[1,2])");
    }

    #[test]
    fn bind_result_list() {
        let action = ActionTerm::parse("get_email_accounts(Accounts)").unwrap();
        assert_eq!(action.free_vars().len(), 1);
        let value = parse_term(r#"["a@x","b@x"]"#).unwrap();
        let bound = action.bind_argument(1, &value).unwrap();
        assert_eq!(bound.to_string(), r#"get_email_accounts(["a@x","b@x"])"#);
        assert!(bound.free_vars().is_empty());
    }

    #[test]
    fn bind_is_consistent_across_occurrences() {
        let action = ActionTerm::parse("p(X,X)").unwrap();
        let bound = action.bind_argument(1, &Term::atom("v")).unwrap();
        assert_eq!(bound.to_string(), "p(v,v)");
    }

    #[test]
    fn bind_errors() {
        let action = ActionTerm::parse("p(a)").unwrap();
        assert_eq!(
            action.bind_argument(1, &Term::atom("b")),
            Err(TermError::NotAVariable { index: 1 })
        );
        assert_eq!(
            action.bind_argument(2, &Term::atom("b")),
            Err(TermError::IndexOutOfRange { index: 2, arity: 1 })
        );
        assert_eq!(
            action.bind_argument(0, &Term::atom("b")),
            Err(TermError::IndexOutOfRange { index: 0, arity: 1 })
        );
        assert!(ActionTerm::parse("[a]").is_err());
    }

    #[test]
    fn listing_bodies_parse() {
        for text in [
            r#"agents(["c1__a","c1__b","c2__c"])"#,
            r#"check_relevance("ID-1-7", "bob@x", "budget review", "see attached")"#,
            r#"relevant("ID-1-7",["u1@x","u3@x"])"#,
            r#"relevant("ID-1-7",[])"#,
            r#"get_email_accounts(["a@x","b@x","c@x"])"#,
            r#"account_added("x@y")"#,
            "register",
        ] {
            parse_term(text).unwrap_or_else(|e| panic!("{text}: {e}"));
        }
    }

    fn arb_name(first: &'static str) -> impl Strategy<Value = String> {
        proptest::string::string_regex(&format!("{first}[A-Za-z0-9_]{{0,6}}")).unwrap()
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        let leaf = prop_oneof![
            arb_name("[a-z]").prop_map(Term::Atom),
            (-1_000_000i64..1_000_000).prop_map(|n| Term::Number(n as f64)),
            (-1e6f64..1e6).prop_map(Term::Number),
            "[ -~]{0,8}".prop_map(Term::Str),
            arb_name("[A-Z_]").prop_map(Term::Var),
        ];
        leaf.prop_recursive(4, 32, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Term::List),
                (
                    arb_name("[a-z]"),
                    proptest::collection::vec(inner.clone(), 0..4),
                    proptest::collection::vec(inner, 0..3)
                )
                    .prop_map(|(f, a, n)| Term::annotated(f, a, n)),
            ]
        })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(t in arb_term()) {
            let text = t.to_string();
            prop_assert_eq!(parse_term(&text).unwrap(), t);
        }

        #[test]
        fn rebinding_same_index_fails(name in arb_name("[A-Z]"), v in arb_term()) {
            let action = ActionTerm::new(Term::compound("act", vec![Term::Var(name)])).unwrap();
            let bound = action.bind_argument(1, &v).unwrap();
            let again = bound.bind_argument(1, &v);
            if matches!(v, Term::Var(_)) {
                prop_assert!(again.is_ok());
            } else {
                prop_assert_eq!(again, Err(TermError::NotAVariable { index: 1 }));
            }
        }
    }
}

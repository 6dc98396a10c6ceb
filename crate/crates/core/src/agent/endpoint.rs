//! The `agent:` component: `agent:message` and `agent:action` consumers,
//! `agent:message` and `agent:percept` producers.

use std::sync::Arc;

use regex::{Captures, Regex};

use super::container::WeakContainer;
use super::{
    ActionMode, AgentError, AgentId, AgentMessage, PerceptEntry, Persistence, UpdateMode, ALL,
};
use crate::message::{BodyValue, EndpointUri, Exchange, ExchangePattern, Headers};
use crate::route::{Component, Consumer, Producer, RouteContext, RouteError, RouteInlet};
use crate::term::{parse_literal, parse_term, ActionTerm, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    MessageConsumer,
    ActionConsumer,
    MessageProducer,
    PerceptProducer,
}

impl EndpointKind {
    fn allowed(self) -> &'static [&'static str] {
        match self {
            EndpointKind::MessageConsumer => &[
                "illoc_force",
                "sender",
                "receiver",
                "annotations",
                "match",
                "replace",
            ],
            EndpointKind::ActionConsumer => &[
                "actor",
                "annotations",
                "match",
                "replace",
                "resultHeaderMap",
                "actionName",
                "exchangePattern",
            ],
            EndpointKind::MessageProducer => &["illoc_force", "sender", "receiver", "annotations"],
            EndpointKind::PerceptProducer => {
                &["receiver", "annotations", "persistent", "updateMode"]
            }
        }
    }
}

/// A compiled `match` pattern with its optional `replace` template.
#[derive(Debug, Clone)]
pub struct Rewrite {
    source: String,
    regex: Regex,
    replace: Option<String>,
}

impl Rewrite {
    pub fn new(pattern: &str, replace: Option<&str>) -> Result<Self, AgentError> {
        let regex = Regex::new(&format!("^(?:{pattern})$"))
            .map_err(|e| AgentError::InvalidRegex(e.to_string()))?;
        if let Some(r) = replace {
            let groups = regex.captures_len() - 1;
            if let Some(bad) = group_refs(r).into_iter().find(|&g| g > groups) {
                return Err(AgentError::InvalidRegex(format!(
                    "replace refers to group {bad} but the pattern has {groups}"
                )));
            }
        }
        Ok(Rewrite {
            source: pattern.to_owned(),
            regex,
            replace: replace.map(str::to_owned),
        })
    }

    pub fn pattern(&self) -> &str {
        &self.source
    }

    /// `None` unless the whole text matches; otherwise the replaced text
    /// (or the text itself without a template).
    pub fn apply(&self, text: &str) -> Option<String> {
        let caps = self.regex.captures(text)?;
        Some(match &self.replace {
            Some(template) => expand(template, &caps),
            None => text.to_owned(),
        })
    }
}

fn group_refs(template: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let b = template.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'$' && i + 1 < b.len() {
            if b[i + 1] == b'$' {
                i += 2;
                continue;
            }
            if b[i + 1].is_ascii_digit() {
                out.push(usize::from(b[i + 1] - b'0'));
                i += 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Substitutes `$1`..`$9` with captured text; `$$` is a literal `$`.
pub fn expand(template: &str, caps: &Captures<'_>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '$' {
            out.push(c);
            continue;
        }
        match chars.peek() {
            Some('$') => {
                chars.next();
                out.push('$');
            }
            Some(d) if d.is_ascii_digit() => {
                let g = d.to_digit(10).unwrap_or(0) as usize;
                chars.next();
                out.push_str(caps.get(g).map_or("", |m| m.as_str()));
            }
            _ => out.push('$'),
        }
    }
    out
}

/// Splits on commas outside parentheses, brackets and quotes.
pub fn split_top_level(text: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut escaped = false;
    let mut cur = String::new();
    for c in text.chars() {
        if quoted {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                quoted = false;
            }
            continue;
        }
        match c {
            '"' => quoted = true,
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur).trim().to_owned());
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() || !parts.is_empty() {
        parts.push(cur.trim().to_owned());
    }
    parts.retain(|p| !p.is_empty());
    parts
}

/// Reads annotations from `a,b(1)` or `[a,b(1)]`.
pub fn parse_annotations(text: &str) -> Result<Vec<Term>, AgentError> {
    let t = text.trim();
    if t.starts_with('[') {
        return match parse_term(t) {
            Ok(Term::List(items)) => Ok(items),
            _ => Err(AgentError::Config(format!("bad annotation list `{t}`"))),
        };
    }
    split_top_level(t)
        .iter()
        .map(|a| {
            parse_term(a).map_err(|e| AgentError::Config(format!("bad annotation `{a}`: {e}")))
        })
        .collect()
}

fn annotations_text(anns: &[Term]) -> String {
    Term::List(anns.to_vec()).to_string()
}

/// Names from a receiver value: a list, or comma-separated text.
fn receivers_of(v: &BodyValue) -> Vec<String> {
    match v {
        BodyValue::ListOf(items) => items.iter().map(BodyValue::to_text).collect(),
        other => other
            .to_text()
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect(),
    }
}

/// A parsed `agent:` endpoint URI.
#[derive(Debug, Clone)]
pub struct AgentEndpointConfig {
    pub kind: EndpointKind,
    pub illoc_force: Option<String>,
    pub sender: Option<String>,
    pub receiver: Option<Vec<String>>,
    pub actor: Option<String>,
    pub annotations: Vec<Term>,
    pub rewrite: Option<Rewrite>,
    pub result_header_map: Vec<(String, usize)>,
    pub action_name: Option<String>,
    pub exchange_pattern: Option<ExchangePattern>,
    pub persistent: Option<bool>,
    pub update_mode: Option<UpdateMode>,
}

impl AgentEndpointConfig {
    pub fn from_uri(uri: &EndpointUri, consumer: bool) -> Result<Self, AgentError> {
        let kind = match (uri.path.as_str(), consumer) {
            ("message", true) => EndpointKind::MessageConsumer,
            ("message", false) => EndpointKind::MessageProducer,
            ("action", true) => EndpointKind::ActionConsumer,
            ("percept", false) => EndpointKind::PerceptProducer,
            (p, c) => {
                return Err(AgentError::Config(format!(
                    "agent:{p} cannot be used as a {}",
                    if c { "consumer" } else { "producer" }
                )))
            }
        };
        for (k, _) in uri.params() {
            if !kind.allowed().contains(&k.as_str()) {
                return Err(AgentError::Config(format!(
                    "parameter `{k}` is not valid on agent:{}",
                    uri.path
                )));
            }
        }
        let text = |k: &str| uri.param(k).map(str::to_owned);
        let replace = uri.param("replace");
        let rewrite = match uri.param("match") {
            Some(m) => Some(Rewrite::new(m, replace)?),
            None if replace.is_some() => {
                return Err(AgentError::Config("replace requires match".into()))
            }
            None => None,
        };
        let result_header_map = match uri.param("resultHeaderMap") {
            Some(m) => parse_result_header_map(m)?,
            None => Vec::new(),
        };
        let exchange_pattern = uri
            .param("exchangePattern")
            .map(|p| {
                p.parse()
                    .map_err(|_| AgentError::Config(format!("unknown exchangePattern `{p}`")))
            })
            .transpose()?;
        let persistent = uri
            .param("persistent")
            .map(|p| match p {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(AgentError::Config(format!(
                    "persistent must be true or false, got `{other}`"
                ))),
            })
            .transpose()?;
        Ok(AgentEndpointConfig {
            kind,
            illoc_force: text("illoc_force"),
            sender: text("sender"),
            receiver: uri
                .param("receiver")
                .map(|r| receivers_of(&BodyValue::text(r))),
            actor: text("actor"),
            annotations: uri
                .param("annotations")
                .map(parse_annotations)
                .transpose()?
                .unwrap_or_default(),
            rewrite,
            result_header_map,
            action_name: text("actionName"),
            exchange_pattern,
            persistent,
            update_mode: uri.param("updateMode").map(UpdateMode::parse),
        })
    }

    pub fn parse(uri: &str, consumer: bool) -> Result<Self, AgentError> {
        let uri = EndpointUri::parse(uri).map_err(|e| AgentError::Config(e.to_string()))?;
        if uri.scheme != "agent" {
            return Err(AgentError::Config(format!("not an agent endpoint: {uri}")));
        }
        Self::from_uri(&uri, consumer)
    }
}

/// `h1:1,h2:2` pairs; indices are 1-based.
pub fn parse_result_header_map(text: &str) -> Result<Vec<(String, usize)>, AgentError> {
    text.split(',')
        .map(|pair| {
            let (h, i) = pair.trim().rsplit_once(':').ok_or_else(|| {
                AgentError::Config(format!("expected header:index, got `{pair}`"))
            })?;
            let idx: usize = i.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                AgentError::Config(format!(
                    "argument index must be a positive integer in `{pair}`"
                ))
            })?;
            if h.is_empty() {
                return Err(AgentError::Config(format!("empty header name in `{pair}`")));
            }
            Ok((h.to_owned(), idx))
        })
        .collect()
}

fn has_all(wanted: &[Term], present: &[Term]) -> bool {
    wanted.iter().all(|a| present.contains(a))
}

/// The exchange an `agent:message` consumer makes from `msg`, if its
/// selectors accept it.
pub fn consume_agent_message(cfg: &AgentEndpointConfig, msg: &AgentMessage) -> Option<Exchange> {
    if cfg
        .illoc_force
        .as_ref()
        .is_some_and(|f| *f != msg.illoc_force)
        || cfg.sender.as_ref().is_some_and(|s| *s != msg.sender)
    {
        return None;
    }
    if let Some(rs) = &cfg.receiver {
        let ok = if rs.iter().any(|r| r == ALL) {
            msg.receiver == ALL
        } else {
            rs.contains(&msg.receiver)
        };
        if !ok {
            return None;
        }
    }
    if !has_all(&cfg.annotations, &msg.annotations) {
        return None;
    }
    let text = msg.content.to_string();
    let body = match &cfg.rewrite {
        Some(rw) => rw.apply(&text)?,
        None => text,
    };
    let mut headers = Headers::new();
    headers.insert("illoc_force".into(), BodyValue::text(&msg.illoc_force));
    headers.insert("sender".into(), BodyValue::text(&msg.sender));
    headers.insert("receiver".into(), BodyValue::text(&msg.receiver));
    headers.insert(
        "annotations".into(),
        BodyValue::text(annotations_text(&msg.annotations)),
    );
    headers.insert("msg_id".into(), BodyValue::text(&msg.msg_id));
    Some(Exchange::new(
        ExchangePattern::InOnly,
        BodyValue::Text(body),
        headers,
    ))
}

/// The exchange an `agent:action` consumer makes for `actor` performing
/// `term`, if its selectors accept it.
pub fn consume_agent_action(
    cfg: &AgentEndpointConfig,
    actor: &AgentId,
    term: &ActionTerm,
    mode: ActionMode,
) -> Result<Option<Exchange>, AgentError> {
    let literal = term.literal();
    let actor_name = actor.full_name();
    if cfg.actor.as_ref().is_some_and(|a| *a != actor_name)
        || cfg.action_name.as_ref().is_some_and(|n| n != term.name())
        || !has_all(&cfg.annotations, literal.annotations())
    {
        return Ok(None);
    }
    let text = literal.to_string();
    let body = match &cfg.rewrite {
        Some(rw) => match rw.apply(&text) {
            Some(b) => b,
            None => return Ok(None),
        },
        None => text,
    };
    let sync = matches!(mode, ActionMode::Sync(_));
    if sync && cfg.result_header_map.is_empty() {
        return Err(AgentError::Config(format!(
            "an endpoint processing sync action `{}` must have a resultHeaderMap",
            term.name()
        )));
    }
    let pattern = if sync || cfg.exchange_pattern == Some(ExchangePattern::InOut) {
        ExchangePattern::InOut
    } else {
        ExchangePattern::InOnly
    };
    let mut headers = Headers::new();
    headers.insert("actor".into(), BodyValue::text(actor_name));
    headers.insert(
        "annotations".into(),
        BodyValue::text(annotations_text(literal.annotations())),
    );
    headers.insert("actionName".into(), BodyValue::text(term.name()));
    headers.insert(
        "params".into(),
        BodyValue::ListOf(
            literal
                .args()
                .iter()
                .map(|a| BodyValue::text(a.to_string()))
                .collect(),
        ),
    );
    Ok(Some(Exchange::new(pattern, BodyValue::Text(body), headers)))
}

/// Header value to term: text is parsed (falling back to a string), numbers
/// stay numbers.
pub fn header_to_term(v: &BodyValue) -> Term {
    match v {
        BodyValue::Text(t) => parse_term(t).unwrap_or_else(|_| Term::Str(t.clone())),
        other => other.to_term(),
    }
}

/// Binds the reply's result headers into the action's arguments.
pub fn complete_sync_action(
    cfg: &AgentEndpointConfig,
    reply: &Exchange,
    term: &ActionTerm,
) -> Result<ActionTerm, AgentError> {
    let msg = reply.out_msg().unwrap_or(&reply.in_msg);
    let mut bound = term.clone();
    for (h, idx) in &cfg.result_header_map {
        let v = msg
            .header(h)
            .ok_or_else(|| AgentError::MissingResultHeader(h.clone()))?;
        bound = bound
            .bind_argument(*idx, &header_to_term(v))
            .map_err(AgentError::Bind)?;
    }
    Ok(bound)
}

fn field(x: &Exchange, header: &str, param: &Option<String>) -> Option<String> {
    x.in_msg.header_text(header).or_else(|| param.clone())
}

fn receivers(x: &Exchange, cfg: &AgentEndpointConfig) -> Vec<String> {
    let names = match x.header("receiver") {
        Some(v) => receivers_of(v),
        None => cfg.receiver.clone().unwrap_or_default(),
    };
    if names.is_empty() {
        vec![ALL.to_owned()]
    } else {
        names
    }
}

fn annotations(x: &Exchange, cfg: &AgentEndpointConfig) -> Result<Vec<Term>, AgentError> {
    match x.header("annotations") {
        Some(BodyValue::ListOf(items)) => Ok(items.iter().map(header_to_term).collect()),
        Some(v) => parse_annotations(&v.to_text()),
        None => Ok(cfg.annotations.clone()),
    }
}

/// Messages an `agent:message` producer sends for `x`, one per receiver.
/// Headers override URI parameters; `msg_id` is kept when the exchange has
/// one.
pub fn build_agent_messages(
    cfg: &AgentEndpointConfig,
    x: &Exchange,
    default_sender: &str,
    mut next_id: impl FnMut() -> String,
) -> Result<Vec<AgentMessage>, AgentError> {
    let illoc_force =
        field(x, "illoc_force", &cfg.illoc_force).ok_or(AgentError::MissingIllocForce)?;
    let sender = field(x, "sender", &cfg.sender).unwrap_or_else(|| default_sender.to_owned());
    let text = x.body().to_text();
    let content = parse_literal(&text)
        .map_err(|e| AgentError::UnparseableContent(format!("`{text}`: {e}")))?;
    let annotations = annotations(x, cfg)?;
    let given_id = x.in_msg.header_text("msg_id");
    Ok(receivers(x, cfg)
        .into_iter()
        .map(|receiver| AgentMessage {
            illoc_force: illoc_force.clone(),
            sender: sender.clone(),
            receiver,
            content: content.clone(),
            msg_id: given_id.clone().unwrap_or_else(&mut next_id),
            annotations: annotations.clone(),
        })
        .collect())
}

/// Receivers and the percept an `agent:percept` producer delivers for `x`.
pub fn build_percept(
    cfg: &AgentEndpointConfig,
    x: &Exchange,
) -> Result<(Vec<String>, PerceptEntry), AgentError> {
    let text = x.body().to_text();
    let literal = parse_literal(&text)
        .map_err(|e| AgentError::UnparseableContent(format!("`{text}`: {e}")))?;
    let anns = annotations(x, cfg)?;
    let persistent = match x.in_msg.header_text("persistent") {
        Some(p) => p.eq_ignore_ascii_case("true"),
        None => cfg.persistent.unwrap_or(false),
    };
    let update_mode = match x.in_msg.header_text("updateMode") {
        Some(m) => UpdateMode::parse(&m),
        None => cfg.update_mode.unwrap_or_default(),
    };
    Ok((
        receivers(x, cfg),
        PerceptEntry {
            literal: literal.with_annotations(anns),
            persistence: if persistent {
                Persistence::Persistent
            } else {
                Persistence::Transient
            },
            update_mode,
        },
    ))
}

/// `agent:` component bound to one container.
pub struct AgentComponent {
    container: WeakContainer,
}

impl AgentComponent {
    pub(crate) fn new(container: WeakContainer) -> Self {
        AgentComponent { container }
    }
}

struct AgentConsumer {
    cfg: Arc<AgentEndpointConfig>,
    container: WeakContainer,
    registration: Option<u64>,
}

impl Consumer for AgentConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        let c = self
            .container
            .upgrade()
            .ok_or_else(|| RouteError::Config("agent container is gone".into()))?;
        self.registration = Some(c.register_endpoint(Arc::clone(&self.cfg), inlet));
        Ok(())
    }

    fn stop(&mut self) {
        if let (Some(id), Some(c)) = (self.registration.take(), self.container.upgrade()) {
            c.unregister_endpoint(id);
        }
    }
}

struct AgentProducer {
    cfg: AgentEndpointConfig,
    container: WeakContainer,
}

impl Producer for AgentProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let c = self
            .container
            .upgrade()
            .ok_or_else(|| RouteError::Config("agent container is gone".into()))?;
        match self.cfg.kind {
            EndpointKind::MessageProducer => {
                let msgs = build_agent_messages(&self.cfg, &x, c.id(), || c.next_msg_id())?;
                for m in msgs {
                    c.deliver_local(m)?;
                }
            }
            EndpointKind::PerceptProducer => {
                let (to, entry) = build_percept(&self.cfg, &x)?;
                c.deliver_percept(&to, entry)?;
            }
            _ => unreachable!("consumer kinds are rejected at creation"),
        }
        Ok(x)
    }
}

impl Component for AgentComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        let cfg =
            AgentEndpointConfig::from_uri(uri, false).map_err(|e| RouteError::init(uri, e))?;
        Ok(Arc::new(AgentProducer {
            cfg,
            container: self.container.clone(),
        }))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        let cfg = AgentEndpointConfig::from_uri(uri, true).map_err(|e| RouteError::init(uri, e))?;
        Ok(Box::new(AgentConsumer {
            cfg: Arc::new(cfg),
            container: self.container.clone(),
            registration: None,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_groups_and_escape() {
        let rw = Rewrite::new(r"(\w+)-(\w+)", Some("$2:$1 costs $$5")).unwrap();
        assert_eq!(rw.apply("ab-cd").unwrap(), "cd:ab costs $5");
        assert!(rw.apply("ab-cd!").is_none(), "match is anchored");
        assert!(Rewrite::new("(a)", Some("$2")).is_err());
        assert!(Rewrite::new("(", None).is_err());
    }

    #[test]
    fn top_level_split() {
        assert_eq!(
            split_top_level(r#"a,b(1,2),[x,y],"c,d""#),
            ["a", "b(1,2)", "[x,y]", "\"c,d\""]
        );
        assert!(split_top_level("").is_empty());
    }

    #[test]
    fn result_header_map_pairs() {
        assert_eq!(
            parse_result_header_map("result:1").unwrap(),
            [("result".to_owned(), 1)]
        );
        assert_eq!(parse_result_header_map("h1:1,h2:2").unwrap().len(), 2);
        for bad in ["result", "result:0", ":1", "r:x"] {
            assert!(parse_result_header_map(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn kind_and_params_validated() {
        assert!(AgentEndpointConfig::parse("agent:percept", true).is_err());
        assert!(AgentEndpointConfig::parse("agent:action", false).is_err());
        assert!(AgentEndpointConfig::parse("agent:message?persistent=true", true).is_err());
        assert!(AgentEndpointConfig::parse("agent:message?replace=x", true).is_err());
        assert!(AgentEndpointConfig::parse("agent:message?resultHeaderMap=r:1", true).is_err());
        let cfg = AgentEndpointConfig::parse("agent:percept?persistent=true&updateMode=-+", false)
            .unwrap();
        assert_eq!(cfg.update_mode, Some(UpdateMode::ReplaceSameFunctorArity));
    }
}

//! Agents, their percept and message queues, and the container that runs
//! them.
//!
//! Agent behaviour is a list of [`BehaviorRule`]s: triggers paired with host
//! hooks that inspect an [`AgentView`] and return [`AgentEffect`]s.

mod container;
pub mod endpoint;
mod state;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use container::{ActionResult, Container, ContainerConfig, ContainerId, Delivery};
pub use endpoint::{AgentComponent, AgentEndpointConfig, EndpointKind};
pub use state::{AgentState, CycleOutput};

use crate::route::RouteError;
use crate::services::CoordError;
use crate::term::{Term, TermError};

/// Reserved receiver meaning every agent.
pub const ALL: &str = "all";
pub const NAME_SEPARATOR: &str = "__";
pub const DEFAULT_SYNC_TIMEOUT: Duration = Duration::from_millis(5000);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid agent name `{0}`")]
    InvalidName(String),
    #[error("agent `{0}` already exists")]
    DuplicateAgent(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("no action endpoint matches `{0}`")]
    NoMatchingEndpoint(String),
    #[error("external action `{0}` cannot contain variables")]
    FreeVariables(String),
    #[error("action timed out after {0:?}")]
    Timeout(Duration),
    #[error("reply lacks result header `{0}`")]
    MissingResultHeader(String),
    #[error("cannot bind action result: {0}")]
    Bind(TermError),
    #[error("content is not a literal: {0}")]
    UnparseableContent(String),
    #[error("no illocutionary force given by header or parameter")]
    MissingIllocForce,
    #[error("invalid regex: {0}")]
    InvalidRegex(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("coordination service: {0}")]
    Coordination(#[from] CoordError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

impl From<AgentError> for RouteError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Route(r) => r,
            other => RouteError::Process {
                name: "agent".into(),
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId {
    container_id: String,
    local_name: String,
}

impl AgentId {
    pub fn new(container_id: &str, local_name: &str) -> Result<Self, AgentError> {
        let bad = |s: &str| {
            s.is_empty()
                || s.contains(NAME_SEPARATOR)
                || s.contains(',')
                || s.contains(char::is_whitespace)
        };
        if bad(container_id) || bad(local_name) {
            return Err(AgentError::InvalidName(format!(
                "{container_id}{NAME_SEPARATOR}{local_name}"
            )));
        }
        Ok(AgentId {
            container_id: container_id.to_owned(),
            local_name: local_name.to_owned(),
        })
    }

    /// Splits a full name at the first separator.
    pub fn parse(full: &str) -> Result<Self, AgentError> {
        let (c, l) = full
            .split_once(NAME_SEPARATOR)
            .ok_or_else(|| AgentError::InvalidName(full.to_owned()))?;
        Self::new(c, l)
    }

    pub fn container_id(&self) -> &str {
        &self.container_id
    }

    pub fn local_name(&self) -> &str {
        &self.local_name
    }

    pub fn full_name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{NAME_SEPARATOR}{}",
            self.container_id, self.local_name
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMessage {
    pub illoc_force: String,
    pub sender: String,
    pub receiver: String,
    pub content: Term,
    pub msg_id: String,
    pub annotations: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Persistence {
    Transient,
    Persistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    #[default]
    Accumulate,
    /// `-+`: drop stored percepts with the same functor and arity first.
    ReplaceSameFunctorArity,
}

impl UpdateMode {
    pub fn parse(s: &str) -> Self {
        if s == "-+" {
            UpdateMode::ReplaceSameFunctorArity
        } else {
            UpdateMode::Accumulate
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptEntry {
    pub literal: Term,
    pub persistence: Persistence,
    pub update_mode: UpdateMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Async,
    Sync(Duration),
}

impl ActionMode {
    pub fn sync() -> Self {
        ActionMode::Sync(DEFAULT_SYNC_TIMEOUT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEffect {
    SendMessage {
        illoc_force: String,
        receiver: String,
        content: Term,
        annotations: Vec<Term>,
    },
    PerformAction {
        term: Term,
        mode: ActionMode,
    },
    /// Sets an internal belief; visible to later rules in the same cycle.
    UpdateInternal {
        key: String,
        value: Term,
    },
}

impl AgentEffect {
    pub fn tell(receiver: impl Into<String>, content: Term) -> Self {
        Self::send("tell", receiver, content)
    }

    pub fn send(
        illoc_force: impl Into<String>,
        receiver: impl Into<String>,
        content: Term,
    ) -> Self {
        AgentEffect::SendMessage {
            illoc_force: illoc_force.into(),
            receiver: receiver.into(),
            content,
            annotations: Vec::new(),
        }
    }

    pub fn act(term: Term, mode: ActionMode) -> Self {
        AgentEffect::PerformAction { term, mode }
    }

    pub fn believe(key: impl Into<String>, value: Term) -> Self {
        AgentEffect::UpdateInternal {
            key: key.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    OnStartup,
    OnPercept {
        functor: String,
        arity: usize,
    },
    /// `functor` of `None` matches any content.
    OnMessage {
        illoc_force: String,
        functor: Option<String>,
    },
    /// A completed sync action whose literal has this functor.
    OnActionResult {
        functor: String,
    },
}

/// What a hook was fired with.
#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    Startup,
    Percept(&'a Term),
    Message(&'a AgentMessage),
    ActionResult(&'a Term),
}

/// Read-only view of an agent for hooks.
pub struct AgentView<'a> {
    pub id: &'a AgentId,
    pub beliefs: &'a std::collections::BTreeMap<String, Term>,
    pub percepts: &'a [Term],
}

impl AgentView<'_> {
    pub fn belief(&self, key: &str) -> Option<&Term> {
        self.beliefs.get(key)
    }

    /// The stored persistent percept with this functor and arity.
    pub fn percept(&self, functor: &str, arity: usize) -> Option<&Term> {
        self.percepts
            .iter()
            .find(|t| t.functor_arity() == Some((functor, arity)))
    }
}

pub type HookFn =
    Arc<dyn Fn(&AgentView<'_>, Payload<'_>) -> Result<Vec<AgentEffect>, String> + Send + Sync>;

#[derive(Clone)]
pub struct BehaviorRule {
    pub name: String,
    pub trigger: Trigger,
    pub hook: HookFn,
}

impl BehaviorRule {
    pub fn new<F>(name: impl Into<String>, trigger: Trigger, hook: F) -> Self
    where
        F: Fn(&AgentView<'_>, Payload<'_>) -> Result<Vec<AgentEffect>, String>
            + Send
            + Sync
            + 'static,
    {
        BehaviorRule {
            name: name.into(),
            trigger,
            hook: Arc::new(hook),
        }
    }
}

impl fmt::Debug for BehaviorRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BehaviorRule")
            .field("name", &self.name)
            .field("trigger", &self.trigger)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_names() {
        let id = AgentId::new("c1", "alice").unwrap();
        assert_eq!(id.full_name(), "c1__alice");
        assert_eq!(AgentId::parse("c1__alice").unwrap(), id);
        assert!(AgentId::new("c1", "a__b").is_err());
        assert!(AgentId::parse("all").is_err());
        assert_eq!(
            AgentId::new("container0000000000", "a")
                .unwrap()
                .full_name(),
            "container0000000000__a"
        );
    }

    #[test]
    fn update_mode_text() {
        assert_eq!(UpdateMode::parse("-+"), UpdateMode::ReplaceSameFunctorArity);
        assert_eq!(UpdateMode::parse("+"), UpdateMode::Accumulate);
    }
}

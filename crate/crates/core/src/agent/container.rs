use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};

use super::endpoint::{
    complete_sync_action, consume_agent_action, consume_agent_message, AgentComponent,
};
use super::state::{AgentState, CycleOutput};
use super::{
    ActionMode, AgentEffect, AgentEndpointConfig, AgentError, AgentId, AgentMessage, BehaviorRule,
    EndpointKind, PerceptEntry, ALL, DEFAULT_SYNC_TIMEOUT,
};
use crate::route::events::{ACTION, DEAD_LETTER, DELIVER, ERROR, PERCEPT};
use crate::route::{EventLog, RouteContext, RouteError, RouteInlet};
use crate::services::{Coordinator, CreateMode, Services, SessionId};
use crate::term::ActionTerm;

/// Longest an idle agent waits before cycling again.
const IDLE_FLOOR: Duration = Duration::from_millis(10);
pub const CONTAINERS_PATH: &str = "/containers/container";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContainerId {
    Static(String),
    /// Named after an ephemeral-sequential node under `/containers`.
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct ContainerConfig {
    pub id: ContainerId,
    /// Deliver messages between local agents without going through routes.
    pub direct_delivery: bool,
    pub sync_timeout: Duration,
    /// Run each agent on its own thread; otherwise agents are stepped by
    /// the caller.
    pub threaded: bool,
}

impl ContainerConfig {
    pub fn fixed(id: impl Into<String>) -> Self {
        ContainerConfig {
            id: ContainerId::Static(id.into()),
            direct_delivery: false,
            sync_timeout: DEFAULT_SYNC_TIMEOUT,
            threaded: true,
        }
    }

    pub fn dynamic() -> Self {
        ContainerConfig {
            id: ContainerId::Dynamic,
            ..Self::fixed("")
        }
    }

    pub fn direct_delivery(mut self, on: bool) -> Self {
        self.direct_delivery = on;
        self
    }

    pub fn threaded(mut self, on: bool) -> Self {
        self.threaded = on;
        self
    }

    pub fn sync_timeout(mut self, d: Duration) -> Self {
        self.sync_timeout = d;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// Put straight into this many local inboxes.
    Delivered(usize),
    /// Accepted by this many `agent:message` consumers (0 is a dead letter).
    ToRoutes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionResult {
    True,
    Bound(ActionTerm),
}

struct AgentCell {
    state: Mutex<AgentState>,
    wake: Mutex<bool>,
    cond: Condvar,
}

impl AgentCell {
    fn signal(&self) {
        *self.wake.lock() = true;
        self.cond.notify_all();
    }
}

struct Registered {
    id: u64,
    cfg: Arc<AgentEndpointConfig>,
    inlet: RouteInlet,
}

struct ContainerInner {
    id: String,
    ctx: RouteContext,
    events: EventLog,
    session: Option<(Coordinator, SessionId)>,
    agents: RwLock<BTreeMap<String, Arc<AgentCell>>>,
    endpoints: RwLock<Vec<Registered>>,
    next_registration: AtomicU64,
    msg_counter: AtomicU64,
    direct_delivery: bool,
    sync_timeout: Duration,
    threaded: bool,
    running: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// A group of agents sharing a container id and a route context.
#[derive(Clone)]
pub struct Container {
    inner: Arc<ContainerInner>,
}

#[derive(Clone)]
pub(crate) struct WeakContainer(Weak<ContainerInner>);

impl WeakContainer {
    pub(crate) fn upgrade(&self) -> Option<Container> {
        self.0.upgrade().map(|inner| Container { inner })
    }
}

impl std::fmt::Debug for Container {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Container")
            .field("id", &self.inner.id)
            .finish()
    }
}

impl Container {
    /// Creates the container and its route context. With `services`, the
    /// context gets the service components and a coordination session.
    pub fn new(
        cfg: ContainerConfig,
        services: Option<&Services>,
        events: EventLog,
    ) -> Result<Self, AgentError> {
        let session = services
            .map(|s| s.coord.open_session().map(|id| (s.coord.clone(), id)))
            .transpose()?;
        let id = match &cfg.id {
            ContainerId::Static(id) => id.clone(),
            ContainerId::Dynamic => {
                let (coord, sid) = session.as_ref().ok_or_else(|| {
                    AgentError::Config("dynamic container ids need the coordination service".into())
                })?;
                let path = coord.create(
                    *sid,
                    CONTAINERS_PATH,
                    "",
                    CreateMode::EphemeralSequential,
                    true,
                )?;
                path.rsplit('/').next().unwrap_or_default().to_owned()
            }
        };
        if id.is_empty() || id == ALL || id.contains(super::NAME_SEPARATOR) {
            return Err(AgentError::InvalidName(id));
        }
        let ctx = RouteContext::new(id.clone(), events.clone());
        if let (Some(s), Some((_, sid))) = (services, &session) {
            s.install(&ctx, *sid);
        }
        let container = Container {
            inner: Arc::new(ContainerInner {
                id,
                ctx,
                events,
                session,
                agents: RwLock::new(BTreeMap::new()),
                endpoints: RwLock::new(Vec::new()),
                next_registration: AtomicU64::new(1),
                msg_counter: AtomicU64::new(1),
                direct_delivery: cfg.direct_delivery,
                sync_timeout: cfg.sync_timeout,
                threaded: cfg.threaded,
                running: AtomicBool::new(false),
                threads: Mutex::new(Vec::new()),
            }),
        };
        container.inner.ctx.add_component(
            "agent",
            Arc::new(AgentComponent::new(container.downgrade())),
        );
        Ok(container)
    }

    pub(crate) fn downgrade(&self) -> WeakContainer {
        WeakContainer(Arc::downgrade(&self.inner))
    }

    pub fn id(&self) -> &str {
        &self.inner.id
    }

    pub fn context(&self) -> &RouteContext {
        &self.inner.ctx
    }

    pub fn events(&self) -> &EventLog {
        &self.inner.events
    }

    pub fn session(&self) -> Option<SessionId> {
        self.inner.session.as_ref().map(|(_, s)| *s)
    }

    pub fn next_msg_id(&self) -> String {
        format!(
            "{}-{}",
            self.inner.id,
            self.inner.msg_counter.fetch_add(1, Ordering::Relaxed)
        )
    }

    pub fn add_agent(
        &self,
        local_name: &str,
        rules: Vec<BehaviorRule>,
    ) -> Result<AgentId, AgentError> {
        let id = AgentId::new(&self.inner.id, local_name)?;
        let full = id.full_name();
        let cell = Arc::new(AgentCell {
            state: Mutex::new(AgentState::new(id.clone(), rules)),
            wake: Mutex::new(true),
            cond: Condvar::new(),
        });
        {
            let mut agents = self.inner.agents.write();
            if agents.contains_key(&full) {
                return Err(AgentError::DuplicateAgent(full));
            }
            agents.insert(full, Arc::clone(&cell));
        }
        if self.inner.threaded && self.inner.running.load(Ordering::SeqCst) {
            self.spawn_agent(id.clone(), cell);
        }
        Ok(id)
    }

    /// Sorted full names of the local agents.
    pub fn agent_names(&self) -> Vec<String> {
        self.inner.agents.read().keys().cloned().collect()
    }

    fn cell(&self, full: &str) -> Result<Arc<AgentCell>, AgentError> {
        self.inner
            .agents
            .read()
            .get(full)
            .cloned()
            .ok_or_else(|| AgentError::UnknownAgent(full.to_owned()))
    }

    /// Reads an agent's state.
    pub fn with_agent<R>(
        &self,
        full: &str,
        f: impl FnOnce(&AgentState) -> R,
    ) -> Result<R, AgentError> {
        let cell = self.cell(full)?;
        let st = cell.state.lock();
        Ok(f(&st))
    }

    /// Starts agent threads (when threaded).
    pub fn start(&self) {
        if self.inner.running.swap(true, Ordering::SeqCst) || !self.inner.threaded {
            return;
        }
        let agents: Vec<(AgentId, Arc<AgentCell>)> = self
            .inner
            .agents
            .read()
            .values()
            .map(|c| (c.state.lock().id().clone(), Arc::clone(c)))
            .collect();
        for (id, cell) in agents {
            self.spawn_agent(id, cell);
        }
    }

    fn spawn_agent(&self, id: AgentId, cell: Arc<AgentCell>) {
        let me = self.clone();
        let handle = std::thread::Builder::new()
            .name(format!("agent-{id}"))
            .spawn(move || {
                while me.inner.running.load(Ordering::SeqCst) {
                    let out = cell.state.lock().cycle();
                    me.execute(&id, &cell, out.effects);
                    let mut wake = cell.wake.lock();
                    if !*wake && me.inner.running.load(Ordering::SeqCst) {
                        cell.cond.wait_for(&mut wake, IDLE_FLOOR);
                    }
                    *wake = false;
                }
            })
            .expect("spawn agent thread");
        self.inner.threads.lock().push(handle);
    }

    /// Runs one cycle of `full` on the caller's thread and executes its
    /// effects.
    pub fn step(&self, full: &str) -> Result<CycleOutput, AgentError> {
        let cell = self.cell(full)?;
        let mut out = cell.state.lock().cycle();
        let id = cell.state.lock().id().clone();
        let effects = std::mem::take(&mut out.effects);
        out.effects = effects.clone();
        self.execute(&id, &cell, effects);
        Ok(out)
    }

    /// Steps every agent until none has pending input, up to `max_rounds`.
    pub fn run_until_idle(&self, max_rounds: usize) -> Result<usize, AgentError> {
        for round in 0..max_rounds {
            let busy: Vec<String> = self
                .inner
                .agents
                .read()
                .iter()
                .filter(|(_, c)| c.state.lock().has_pending())
                .map(|(n, _)| n.clone())
                .collect();
            if busy.is_empty() {
                return Ok(round);
            }
            for name in busy {
                self.step(&name)?;
            }
        }
        Ok(max_rounds)
    }

    fn execute(&self, id: &AgentId, cell: &AgentCell, effects: Vec<AgentEffect>) {
        let me = id.full_name();
        for e in effects {
            match e {
                AgentEffect::SendMessage {
                    illoc_force,
                    receiver,
                    content,
                    annotations,
                } => {
                    let msg = AgentMessage {
                        illoc_force,
                        sender: me.clone(),
                        receiver,
                        content,
                        msg_id: self.next_msg_id(),
                        annotations,
                    };
                    self.route_local_message(msg);
                }
                AgentEffect::PerformAction { term, mode } => {
                    let text = term.to_string();
                    let result = ActionTerm::new(term)
                        .map_err(AgentError::Bind)
                        .and_then(|t| self.perform_action(id, &t, mode));
                    match result {
                        Ok(ActionResult::Bound(t)) => {
                            self.inner.events.record(
                                &me,
                                ACTION,
                                "",
                                format!("bound {}", t.literal()),
                            );
                            cell.state.lock().push_action_result(t.into_literal());
                            cell.signal();
                        }
                        Ok(ActionResult::True) => {}
                        Err(e) => {
                            tracing::warn!(agent = %me, "action {text} failed: {e}");
                            self.inner
                                .events
                                .record(&me, ERROR, "", format!("action {text}: {e}"));
                        }
                    }
                }
                AgentEffect::UpdateInternal { key, value } => {
                    cell.state.lock().set_belief(key, value);
                }
            }
        }
    }

    /// Resolves a receiver list to local cells.
    fn targets(&self, receivers: &[String]) -> Result<Vec<Arc<AgentCell>>, AgentError> {
        let agents = self.inner.agents.read();
        if receivers.iter().any(|r| r == ALL) {
            return Ok(agents.values().cloned().collect());
        }
        receivers
            .iter()
            .map(|r| {
                agents
                    .get(r)
                    .cloned()
                    .ok_or_else(|| AgentError::UnknownAgent(r.clone()))
            })
            .collect()
    }

    pub fn deliver_percept(
        &self,
        receivers: &[String],
        entry: PerceptEntry,
    ) -> Result<usize, AgentError> {
        let cells = self.targets(receivers)?;
        for cell in &cells {
            let name = {
                let mut st = cell.state.lock();
                st.deliver_percept(entry.clone());
                st.id().full_name()
            };
            self.inner
                .events
                .record(&name, PERCEPT, "", entry.literal.to_string());
            cell.signal();
        }
        Ok(cells.len())
    }

    /// Puts `msg` into the inboxes of its local receiver(s).
    pub fn deliver_local(&self, msg: AgentMessage) -> Result<usize, AgentError> {
        let cells = self.targets(std::slice::from_ref(&msg.receiver))?;
        for cell in &cells {
            let name = {
                let mut st = cell.state.lock();
                st.push_message(msg.clone());
                st.id().full_name()
            };
            self.inner.events.record(
                &name,
                DELIVER,
                "",
                format!("{} {} from {}", msg.illoc_force, msg.content, msg.sender),
            );
            cell.signal();
        }
        Ok(cells.len())
    }

    pub fn is_local(&self, name: &str) -> bool {
        self.inner.agents.read().contains_key(name)
    }

    /// Delivers directly when enabled and the receiver is local (or `all`);
    /// otherwise offers the message to the `agent:message` consumers.
    pub fn route_local_message(&self, msg: AgentMessage) -> Delivery {
        if self.inner.direct_delivery && (msg.receiver == ALL || self.is_local(&msg.receiver)) {
            if let Ok(n) = self.deliver_local(msg.clone()) {
                return Delivery::Delivered(n);
            }
        }
        let mut accepted = 0;
        for (cfg, inlet) in self.endpoints_of(EndpointKind::MessageConsumer) {
            if let Some(x) = consume_agent_message(&cfg, &msg) {
                match inlet.submit(x) {
                    Ok(()) => accepted += 1,
                    Err(e) => {
                        tracing::debug!("message endpoint on {} refused: {e}", inlet.route_id())
                    }
                }
            }
        }
        if accepted == 0 {
            self.inner.events.record(
                &self.inner.id,
                DEAD_LETTER,
                "",
                format!(
                    "{} {} from {} to {}",
                    msg.illoc_force, msg.content, msg.sender, msg.receiver
                ),
            );
        }
        Delivery::ToRoutes(accepted)
    }

    fn endpoints_of(&self, kind: EndpointKind) -> Vec<(Arc<AgentEndpointConfig>, RouteInlet)> {
        self.inner
            .endpoints
            .read()
            .iter()
            .filter(|r| r.cfg.kind == kind)
            .map(|r| (Arc::clone(&r.cfg), r.inlet.clone()))
            .collect()
    }

    /// Offers `term` to the action endpoints. Async needs a ground term and
    /// returns at once; sync sends to the first matching endpoint and binds
    /// its result headers into the term.
    pub fn perform_action(
        &self,
        actor: &AgentId,
        term: &ActionTerm,
        mode: ActionMode,
    ) -> Result<ActionResult, AgentError> {
        let endpoints = self.endpoints_of(EndpointKind::ActionConsumer);
        match mode {
            ActionMode::Async => {
                if !term.free_vars().is_empty() {
                    return Err(AgentError::FreeVariables(term.literal().to_string()));
                }
                let mut matched = 0;
                for (cfg, inlet) in &endpoints {
                    if let Some(x) = consume_agent_action(cfg, actor, term, mode)? {
                        matched += 1;
                        inlet.submit(x)?;
                    }
                }
                if matched == 0 {
                    return Err(AgentError::NoMatchingEndpoint(term.literal().to_string()));
                }
                Ok(ActionResult::True)
            }
            ActionMode::Sync(timeout) => {
                let mut chosen = None;
                let mut extra = 0;
                for (cfg, inlet) in &endpoints {
                    if chosen.is_none() {
                        if let Some(x) = consume_agent_action(cfg, actor, term, mode)? {
                            chosen = Some((cfg, inlet, x));
                        }
                    } else if consume_agent_action(cfg, actor, term, ActionMode::Async)?.is_some() {
                        extra += 1;
                    }
                }
                let (cfg, inlet, x) = chosen
                    .ok_or_else(|| AgentError::NoMatchingEndpoint(term.literal().to_string()))?;
                if extra > 0 {
                    tracing::warn!(
                        "{extra} more endpoints match sync action {}; using the first",
                        term.name()
                    );
                }
                let timeout = if timeout.is_zero() {
                    self.inner.sync_timeout
                } else {
                    timeout
                };
                let reply = inlet.request(x, timeout).map_err(|e| match e {
                    RouteError::Timeout(d) => AgentError::Timeout(d),
                    other => AgentError::Route(other),
                })?;
                complete_sync_action(cfg, &reply, term).map(ActionResult::Bound)
            }
        }
    }

    pub(crate) fn register_endpoint(
        &self,
        cfg: Arc<AgentEndpointConfig>,
        inlet: RouteInlet,
    ) -> u64 {
        let id = self.inner.next_registration.fetch_add(1, Ordering::Relaxed);
        self.inner
            .endpoints
            .write()
            .push(Registered { id, cfg, inlet });
        id
    }

    pub(crate) fn unregister_endpoint(&self, id: u64) {
        self.inner.endpoints.write().retain(|r| r.id != id);
    }

    /// Ends the coordination session, as a crash would.
    pub fn expire_session(&self) -> Result<(), AgentError> {
        if let Some((coord, sid)) = &self.inner.session {
            if coord.session_alive(*sid) {
                coord.expire_session(*sid)?;
            }
        }
        Ok(())
    }

    /// Stops routes, then agents, then ends the session. Must not be
    /// called from an agent or route thread.
    pub fn shutdown(&self) {
        self.inner.ctx.shutdown();
        self.inner.running.store(false, Ordering::SeqCst);
        for cell in self.inner.agents.read().values() {
            cell.signal();
        }
        let threads = std::mem::take(&mut *self.inner.threads.lock());
        let me = std::thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
        if let Err(e) = self.expire_session() {
            tracing::debug!("session already gone: {e}");
        }
    }

    pub fn is_running(&self) -> bool {
        self.inner.running.load(Ordering::SeqCst)
    }
}

//! Route execution: processors between a consumer endpoint and producer
//! endpoints, with lifecycle control.
//!
//! Every started route owns one thread that takes exchanges from a bounded
//! inlet queue and runs the pipeline to completion, one exchange at a time.
//! The same thread ticks every [`TICK`] to flush timed-out aggregation
//! buckets. `direct:` producers bypass the queue and run the target
//! pipeline on the caller's thread.

mod aggregate;
mod builtin;
mod definition;
pub mod events;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Select, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use thiserror::Error;

pub use builtin::MockEndpoint;
pub use definition::{
    body, constant, header, simple, AggregationStrategy, Completion, IdempotentRepository,
    IntoExpr, ProcessFn, Processor, RouteBuilder, RouteDefinition, Simple,
};
pub use events::{Event, EventLog};

use crate::expr::{Expr, ExprError};
use crate::message::{BodyValue, EndpointUri, Exchange, ExchangePattern, MalformedUri};
use crate::term::{Term, TermError};
use aggregate::Aggregator;

/// Aggregation timeout granularity.
pub const TICK: Duration = Duration::from_millis(50);
const INLET_CAPACITY: usize = 1024;

pub const SPLIT_INDEX: &str = "split.index";
pub const SPLIT_SIZE: &str = "split.size";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("no component registered for scheme `{0}`")]
    UnknownScheme(String),
    #[error("cannot initialise endpoint `{uri}`: {reason}")]
    EndpointInit { uri: String, reason: String },
    #[error("endpoint `{uri}` failed: {reason}")]
    Endpoint { uri: String, reason: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Term(#[from] TermError),
    #[error(transparent)]
    Uri(#[from] MalformedUri),
    #[error("row set has no column `{0}`")]
    MissingColumn(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("unknown route `{0}`")]
    UnknownRoute(String),
    #[error("route `{0}` already exists")]
    DuplicateRoute(String),
    #[error("cannot {action} route `{route}` while {state}")]
    InvalidTransition {
        route: String,
        state: RouteState,
        action: &'static str,
    },
    #[error("route `{0}` is not started")]
    NotStarted(String),
    #[error("no consumer listening on `{0}`")]
    NoConsumer(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("processor `{name}` failed: {reason}")]
    Process { name: String, reason: String },
}

impl RouteError {
    pub fn endpoint(uri: &EndpointUri, reason: impl fmt::Display) -> Self {
        RouteError::Endpoint {
            uri: uri.to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn init(uri: &EndpointUri, reason: impl fmt::Display) -> Self {
        RouteError::EndpointInit {
            uri: uri.to_string(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteState {
    Started,
    Suspended,
    Stopped,
}

impl fmt::Display for RouteState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteState::Started => "started",
            RouteState::Suspended => "suspended",
            RouteState::Stopped => "stopped",
        })
    }
}

/// Lifecycle state of one started route instance, shared with its
/// consumer threads.
pub struct Gate {
    state: Mutex<RouteState>,
    cond: Condvar,
}

impl Gate {
    fn new() -> Self {
        Gate {
            state: Mutex::new(RouteState::Started),
            cond: Condvar::new(),
        }
    }

    pub fn state(&self) -> RouteState {
        *self.state.lock()
    }

    pub fn is_stopped(&self) -> bool {
        self.state() == RouteState::Stopped
    }

    fn transition(
        &self,
        from: &[RouteState],
        to: RouteState,
        on_change: impl FnOnce(),
    ) -> Result<(), RouteState> {
        let mut st = self.state.lock();
        if !from.contains(&st) {
            return Err(*st);
        }
        *st = to;
        on_change();
        drop(st);
        self.cond.notify_all();
        Ok(())
    }

    /// Runs `f` only while started. State changes wait until `f` returns.
    pub fn when_started<R>(&self, f: impl FnOnce() -> R) -> Option<R> {
        let st = self.state.lock();
        (*st == RouteState::Started).then(f)
    }

    /// Blocks while suspended; returns the state that ended the wait.
    pub fn wait_while_suspended(&self) -> RouteState {
        let mut st = self.state.lock();
        while *st == RouteState::Suspended {
            self.cond.wait(&mut st);
        }
        *st
    }

    /// Sleeps for `d` unless stopped first; `false` when stopped.
    pub fn sleep(&self, d: Duration) -> bool {
        let deadline = Instant::now() + d;
        let mut st = self.state.lock();
        while *st != RouteState::Stopped {
            if self.cond.wait_until(&mut st, deadline).timed_out() {
                return *st != RouteState::Stopped;
            }
        }
        false
    }
}

pub trait Producer: Send + Sync {
    /// Handles `x`; the returned exchange continues down the route.
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError>;
}

pub trait Consumer: Send {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError>;
    fn stop(&mut self) {}
}

/// Factory for endpoints of one URI scheme.
pub trait Component: Send + Sync {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        Err(RouteError::init(
            uri,
            "endpoint cannot be used as a producer",
        ))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        Err(RouteError::init(
            uri,
            "endpoint cannot be used as a consumer",
        ))
    }

    /// Single synchronous receive (a polling consumer).
    fn receive_once(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Option<Exchange>, RouteError> {
        Err(RouteError::init(
            uri,
            "endpoint does not support polling receive",
        ))
    }
}

struct Inbound {
    exchange: Exchange,
    reply: Option<Sender<Result<Exchange, RouteError>>>,
}

struct InletShared {
    route_id: String,
    endpoint: String,
    tx: Sender<Inbound>,
    gate: Arc<Gate>,
    pipeline: Arc<Pipeline>,
    events: EventLog,
}

/// The entry point consumers use to hand exchanges to their route.
#[derive(Clone)]
pub struct RouteInlet {
    shared: Arc<InletShared>,
}

/// Handle passed to [`RouteInlet::when_started`] closures.
pub struct Emitter<'a> {
    inlet: &'a RouteInlet,
}

impl Emitter<'_> {
    pub fn submit(&self, x: Exchange) -> Result<(), RouteError> {
        self.inlet.enqueue(x, None)
    }

    pub fn request(
        &self,
        x: Exchange,
    ) -> Result<Receiver<Result<Exchange, RouteError>>, RouteError> {
        let (tx, rx) = bounded(1);
        self.inlet.enqueue(x, Some(tx))?;
        Ok(rx)
    }
}

impl RouteInlet {
    pub fn route_id(&self) -> &str {
        &self.shared.route_id
    }

    pub fn gate(&self) -> &Gate {
        &self.shared.gate
    }

    pub fn state(&self) -> RouteState {
        self.shared.gate.state()
    }

    pub fn events(&self) -> &EventLog {
        &self.shared.events
    }

    fn enqueue(
        &self,
        x: Exchange,
        reply: Option<Sender<Result<Exchange, RouteError>>>,
    ) -> Result<(), RouteError> {
        self.shared.events.record(
            &self.shared.route_id,
            events::RECEIVE,
            x.id().as_str(),
            format!("from {}", self.shared.endpoint),
        );
        self.shared
            .tx
            .send(Inbound { exchange: x, reply })
            .map_err(|_| RouteError::NotStarted(self.shared.route_id.clone()))
    }

    /// Runs `f` while the route is started, holding off suspend/stop until
    /// it returns. Pollers use this so a poll and its submissions are atomic
    /// with respect to lifecycle changes.
    pub fn when_started<R>(&self, f: impl FnOnce(&Emitter<'_>) -> R) -> Option<R> {
        self.shared
            .gate
            .when_started(|| f(&Emitter { inlet: self }))
    }

    /// Queues an in-only exchange.
    pub fn submit(&self, x: Exchange) -> Result<(), RouteError> {
        self.when_started(|em| em.submit(x))
            .unwrap_or_else(|| Err(RouteError::NotStarted(self.shared.route_id.clone())))
    }

    /// Queues an exchange and waits for the route's reply.
    pub fn request(&self, mut x: Exchange, timeout: Duration) -> Result<Exchange, RouteError> {
        x.set_pattern(ExchangePattern::InOut);
        let rx = self
            .when_started(|em| em.request(x))
            .unwrap_or_else(|| Err(RouteError::NotStarted(self.shared.route_id.clone())))?;
        match rx.recv_timeout(timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => Err(RouteError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(RouteError::NotStarted(self.shared.route_id.clone()))
            }
        }
    }

    /// Runs the pipeline on the calling thread.
    pub fn process_inline(&self, x: Exchange) -> Result<Exchange, RouteError> {
        if self.state() != RouteState::Started {
            return Err(RouteError::NotStarted(self.shared.route_id.clone()));
        }
        self.shared.events.record(
            &self.shared.route_id,
            events::RECEIVE,
            x.id().as_str(),
            format!("from {}", self.shared.endpoint),
        );
        self.shared.pipeline.run(x)
    }
}

/// Spawns a thread that calls `poll` every `interval` while the route is
/// started, pausing while suspended and exiting when stopped.
pub fn spawn_poller<F>(
    inlet: RouteInlet,
    name: &str,
    interval: Duration,
    mut poll: F,
) -> JoinHandle<()>
where
    F: FnMut(&Emitter<'_>) + Send + 'static,
{
    std::thread::Builder::new()
        .name(format!("poll-{name}"))
        .spawn(move || loop {
            if inlet.gate().wait_while_suspended() == RouteState::Stopped {
                break;
            }
            inlet.when_started(&mut poll);
            if !inlet.gate().sleep(interval) {
                break;
            }
        })
        .expect("spawn poller thread")
}

/// Spawns a thread handing each value received on `rx` to `handle` while
/// the route is started. Waiting happens outside the gate lock so the
/// route itself is never held up by an idle consumer.
pub fn spawn_receiver<T, F>(
    inlet: RouteInlet,
    name: &str,
    rx: Receiver<T>,
    mut handle: F,
) -> JoinHandle<()>
where
    T: Send + 'static,
    F: FnMut(&Emitter<'_>, T) + Send + 'static,
{
    std::thread::Builder::new()
        .name(format!("recv-{name}"))
        .spawn(move || loop {
            if inlet.gate().wait_while_suspended() == RouteState::Stopped {
                break;
            }
            let mut sel = Select::new();
            sel.recv(&rx);
            if sel.ready_timeout(TICK).is_err() {
                continue;
            }
            // Another consumer of a shared queue may win the race.
            inlet.when_started(|em| {
                if let Ok(v) = rx.try_recv() {
                    handle(em, v);
                }
            });
        })
        .expect("spawn receiver thread")
}

/// What a custom processor can reach.
pub struct ProcessContext {
    route_id: String,
    context: WeakContext,
}

impl ProcessContext {
    pub fn route_id(&self) -> &str {
        &self.route_id
    }

    pub fn context(&self) -> Option<RouteContext> {
        self.context.upgrade()
    }

    /// Polls `uri` once and returns the received body.
    pub fn receive_body(&self, uri: &str) -> Result<BodyValue, RouteError> {
        let ctx = self
            .context()
            .ok_or_else(|| RouteError::Config("route context is gone".into()))?;
        Ok(ctx
            .receive_once(uri)?
            .map(|x| x.in_msg.body)
            .unwrap_or_default())
    }
}

enum Step {
    SetHeader(String, Expr),
    SetBody(Expr),
    Filter {
        expr: Expr,
        expected: String,
        negate: bool,
    },
    To(Vec<(EndpointUri, Arc<dyn Producer>)>),
    Split(Expr),
    Aggregate(Aggregator),
    Idempotent {
        key: Expr,
        repo: Arc<Mutex<IdempotentRepository>>,
    },
    Rows(String),
    Custom(String, ProcessFn),
}

enum Outcome {
    Next(Exchange),
    Stop(Exchange),
    Fork(Exchange, Vec<Exchange>),
}

pub(crate) struct Pipeline {
    route_id: String,
    steps: Vec<Step>,
    events: EventLog,
    process_ctx: ProcessContext,
}

impl Pipeline {
    fn compile(def: &RouteDefinition, ctx: &RouteContext) -> Result<Self, RouteError> {
        let mut steps = Vec::with_capacity(def.steps.len());
        for p in &def.steps {
            steps.push(match p {
                Processor::SetHeader { name, expr } => Step::SetHeader(name.clone(), expr.clone()),
                Processor::SetBody(e) => Step::SetBody(e.clone()),
                Processor::Filter {
                    expr,
                    expected,
                    negate,
                } => Step::Filter {
                    expr: expr.clone(),
                    expected: expected.clone(),
                    negate: *negate,
                },
                Processor::To(uris) => Step::To(
                    uris.iter()
                        .map(|u| {
                            Ok((
                                u.clone(),
                                ctx.component(&u.scheme)?.create_producer(u, ctx)?,
                            ))
                        })
                        .collect::<Result<_, RouteError>>()?,
                ),
                Processor::Split(e) => Step::Split(e.clone()),
                Processor::Aggregate {
                    correlation,
                    strategy,
                    completion,
                } => Step::Aggregate(Aggregator::new(
                    correlation.clone(),
                    strategy.clone(),
                    completion.clone(),
                )),
                Processor::IdempotentConsumer { key, repo } => Step::Idempotent {
                    key: key.clone(),
                    repo: Arc::clone(repo),
                },
                Processor::TransformRowsToQuotedList { column } => Step::Rows(column.clone()),
                Processor::Custom { name, hook } => Step::Custom(name.clone(), Arc::clone(hook)),
            });
        }
        Ok(Pipeline {
            route_id: def.route_id.clone(),
            steps,
            events: ctx.events().clone(),
            process_ctx: ProcessContext {
                route_id: def.route_id.clone(),
                context: ctx.downgrade(),
            },
        })
    }

    /// Runs a fresh exchange through every step, logging a failure.
    fn run(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let id = x.id().clone();
        self.run_from(0, x).inspect_err(|e| {
            tracing::warn!(route = %self.route_id, "exchange {id} failed: {e}");
            self.events
                .record(&self.route_id, events::ERROR, id.as_str(), e.to_string());
        })
    }

    fn run_from(&self, start: usize, mut x: Exchange) -> Result<Exchange, RouteError> {
        let mut idx = start;
        while idx < self.steps.len() {
            match self.apply(&self.steps[idx], x)? {
                Outcome::Next(next) => {
                    x = next;
                    idx += 1;
                }
                Outcome::Stop(done) => return Ok(done),
                Outcome::Fork(parent, children) => {
                    let mut first_err = None;
                    for child in children {
                        let cid = child.id().clone();
                        if let Err(e) = self.run_from(idx + 1, child) {
                            self.events.record(
                                &self.route_id,
                                events::ERROR,
                                cid.as_str(),
                                e.to_string(),
                            );
                            first_err.get_or_insert(e);
                        }
                    }
                    return first_err.map_or(Ok(parent), Err);
                }
            }
        }
        Ok(x)
    }

    fn apply(&self, step: &Step, mut x: Exchange) -> Result<Outcome, RouteError> {
        match step {
            Step::SetHeader(name, e) => {
                let v = e.eval(&x)?;
                x.set_header(name.clone(), v);
            }
            Step::SetBody(e) => {
                let v = e.eval(&x)?;
                x.set_body(v);
            }
            Step::Filter {
                expr,
                expected,
                negate,
            } => {
                let pass = (expr.eval_text(&x)? == *expected) != *negate;
                if !pass {
                    self.events.record(
                        &self.route_id,
                        events::FILTERED,
                        x.id().as_str(),
                        expr.to_string(),
                    );
                    return Ok(Outcome::Stop(x));
                }
            }
            Step::To(targets) => return self.send(targets, x).map(Outcome::Next),
            Step::Split(e) => {
                let items: Vec<BodyValue> = match e.eval(&x)? {
                    BodyValue::ListOf(items) => items,
                    BodyValue::RowSet(rs) => rs
                        .rows()
                        .map(|r| BodyValue::texts(r.iter().cloned()))
                        .collect(),
                    other => {
                        return Err(RouteError::TypeMismatch(format!(
                            "split needs a collection, got `{}`",
                            other.to_text()
                        )))
                    }
                };
                let size = items.len();
                let children = items
                    .into_iter()
                    .enumerate()
                    .map(|(i, item)| {
                        let mut headers = x.in_msg.headers.clone();
                        headers.insert(SPLIT_INDEX.into(), BodyValue::Number(i as f64));
                        headers.insert(SPLIT_SIZE.into(), BodyValue::Number(size as f64));
                        Exchange::new(ExchangePattern::InOnly, item, headers)
                    })
                    .collect();
                return Ok(Outcome::Fork(x, children));
            }
            Step::Aggregate(agg) => {
                let original = x.clone();
                return Ok(match agg.offer(x)? {
                    Some(done) => Outcome::Next(done),
                    None => Outcome::Stop(original),
                });
            }
            Step::Idempotent { key, repo } => {
                let k = key.eval_text(&x)?;
                if !repo.lock().check_and_insert(&k) {
                    self.events.record(
                        &self.route_id,
                        events::FILTERED,
                        x.id().as_str(),
                        format!("duplicate {k}"),
                    );
                    return Ok(Outcome::Stop(x));
                }
            }
            Step::Rows(column) => {
                let t = rows_to_quoted_list(x.body(), column)?;
                x.set_body(t);
            }
            Step::Custom(name, hook) => {
                x = hook(x, &self.process_ctx).map_err(|e| match e {
                    RouteError::Process { .. } => e,
                    other => RouteError::Process {
                        name: name.clone(),
                        reason: other.to_string(),
                    },
                })?;
            }
        }
        Ok(Outcome::Next(x))
    }

    fn send(
        &self,
        targets: &[(EndpointUri, Arc<dyn Producer>)],
        x: Exchange,
    ) -> Result<Exchange, RouteError> {
        if let [(uri, producer)] = targets {
            self.events.record(
                &self.route_id,
                events::SEND,
                x.id().as_str(),
                format!("to {uri}"),
            );
            return producer.process(x);
        }
        let mut first_err = None;
        for (uri, producer) in targets {
            self.events.record(
                &self.route_id,
                events::SEND,
                x.id().as_str(),
                format!("to {uri}"),
            );
            if let Err(e) = producer.process(x.clone()) {
                self.events.record(
                    &self.route_id,
                    events::ERROR,
                    x.id().as_str(),
                    format!("{uri}: {e}"),
                );
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(x), Err)
    }

    /// Emits timed-out aggregates down the remainder of the route.
    fn flush_expired(&self, now: Instant) {
        for (idx, step) in self.steps.iter().enumerate() {
            if let Step::Aggregate(agg) = step {
                for x in agg.take_expired(now) {
                    let id = x.id().clone();
                    if let Err(e) = self.run_from(idx + 1, x) {
                        self.events.record(
                            &self.route_id,
                            events::ERROR,
                            id.as_str(),
                            e.to_string(),
                        );
                    }
                }
            }
        }
    }

    fn has_timeouts(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s, Step::Aggregate(a) if a.timeout().is_some()))
    }
}

/// Renders a row set column as an agent list of quoted strings.
pub fn rows_to_quoted_list(body: &BodyValue, column: &str) -> Result<String, RouteError> {
    let BodyValue::RowSet(rs) = body else {
        return Err(RouteError::TypeMismatch(format!(
            "expected a row set body, got `{}`",
            body.to_text()
        )));
    };
    let col = rs
        .column_index(column)
        .ok_or_else(|| RouteError::MissingColumn(column.to_owned()))?;
    Ok(Term::List(rs.rows().map(|r| Term::Str(r[col].clone())).collect()).to_string())
}

struct RunningRoute {
    gate: Arc<Gate>,
    consumer: Box<dyn Consumer>,
    thread: Option<JoinHandle<()>>,
    pipeline: Arc<Pipeline>,
}

struct RouteSlot {
    def: RouteDefinition,
    running: Option<RunningRoute>,
}

type BufferedQueue = (Sender<Exchange>, Receiver<Exchange>);

pub(crate) struct ContextInner {
    name: String,
    events: EventLog,
    components: RwLock<HashMap<String, Arc<dyn Component>>>,
    routes: Mutex<BTreeMap<String, RouteSlot>>,
    direct: RwLock<HashMap<String, RouteInlet>>,
    buffered: Mutex<HashMap<String, BufferedQueue>>,
    mocks: Mutex<HashMap<String, MockEndpoint>>,
}

/// A set of routes sharing components and an event log.
#[derive(Clone)]
pub struct RouteContext {
    inner: Arc<ContextInner>,
}

#[derive(Clone)]
pub struct WeakContext(Weak<ContextInner>);

impl WeakContext {
    pub fn upgrade(&self) -> Option<RouteContext> {
        self.0.upgrade().map(|inner| RouteContext { inner })
    }
}

impl fmt::Debug for RouteContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RouteContext")
            .field("name", &self.inner.name)
            .finish()
    }
}

impl RouteContext {
    pub fn new(name: impl Into<String>, events: EventLog) -> Self {
        let ctx = RouteContext {
            inner: Arc::new(ContextInner {
                name: name.into(),
                events,
                components: RwLock::new(HashMap::new()),
                routes: Mutex::new(BTreeMap::new()),
                direct: RwLock::new(HashMap::new()),
                buffered: Mutex::new(HashMap::new()),
                mocks: Mutex::new(HashMap::new()),
            }),
        };
        builtin::install(&ctx);
        ctx
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn events(&self) -> &EventLog {
        &self.inner.events
    }

    pub fn downgrade(&self) -> WeakContext {
        WeakContext(Arc::downgrade(&self.inner))
    }

    pub fn add_component(&self, scheme: impl Into<String>, component: Arc<dyn Component>) {
        self.inner
            .components
            .write()
            .insert(scheme.into(), component);
    }

    pub fn component(&self, scheme: &str) -> Result<Arc<dyn Component>, RouteError> {
        self.inner
            .components
            .read()
            .get(scheme)
            .cloned()
            .ok_or_else(|| RouteError::UnknownScheme(scheme.to_owned()))
    }

    /// Adds a route, starting it unless auto-startup is off.
    pub fn add_route(&self, def: RouteDefinition) -> Result<RouteController, RouteError> {
        let id = def.route_id.clone();
        let auto = def.auto_startup;
        {
            let mut routes = self.inner.routes.lock();
            if routes.contains_key(&id) {
                return Err(RouteError::DuplicateRoute(id));
            }
            routes.insert(id.clone(), RouteSlot { def, running: None });
        }
        if auto {
            if let Err(e) = self.start_route(&id) {
                self.inner.routes.lock().remove(&id);
                return Err(e);
            }
        }
        Ok(self.controller(&id))
    }

    pub fn controller(&self, route_id: &str) -> RouteController {
        RouteController {
            route_id: route_id.to_owned(),
            ctx: self.downgrade(),
        }
    }

    pub fn route_ids(&self) -> Vec<String> {
        self.inner.routes.lock().keys().cloned().collect()
    }

    pub fn route_state(&self, route_id: &str) -> Result<RouteState, RouteError> {
        let routes = self.inner.routes.lock();
        let slot = routes
            .get(route_id)
            .ok_or_else(|| RouteError::UnknownRoute(route_id.to_owned()))?;
        Ok(slot
            .running
            .as_ref()
            .map_or(RouteState::Stopped, |r| r.gate.state()))
    }

    pub fn start_route(&self, route_id: &str) -> Result<(), RouteError> {
        let mut routes = self.inner.routes.lock();
        let slot = routes
            .get_mut(route_id)
            .ok_or_else(|| RouteError::UnknownRoute(route_id.to_owned()))?;
        if let Some(r) = &slot.running {
            return Err(RouteError::InvalidTransition {
                route: route_id.to_owned(),
                state: r.gate.state(),
                action: "start",
            });
        }
        let def = slot.def.clone();
        let pipeline = Arc::new(Pipeline::compile(&def, self)?);
        let component = self.component(&def.from_uri.scheme)?;
        let mut consumer = component.create_consumer(&def.from_uri, self)?;
        let gate = Arc::new(Gate::new());
        let (tx, rx) = bounded(INLET_CAPACITY);
        let inlet = RouteInlet {
            shared: Arc::new(InletShared {
                route_id: def.route_id.clone(),
                endpoint: def.from_uri.to_string(),
                tx,
                gate: Arc::clone(&gate),
                pipeline: Arc::clone(&pipeline),
                events: self.events().clone(),
            }),
        };
        let thread = spawn_route_thread(rx, Arc::clone(&gate), Arc::clone(&pipeline));
        if let Err(e) = consumer.start(inlet) {
            let _ = gate.transition(&[RouteState::Started], RouteState::Stopped, || {});
            return Err(e);
        }
        slot.running = Some(RunningRoute {
            gate,
            consumer,
            thread: Some(thread),
            pipeline,
        });
        drop(routes);
        self.events()
            .record(route_id, events::STARTED, "", def.from_uri.to_string());
        Ok(())
    }

    pub fn suspend_route(&self, route_id: &str) -> Result<(), RouteError> {
        self.transition(
            route_id,
            &[RouteState::Started],
            RouteState::Suspended,
            "suspend",
            events::SUSPENDED,
        )
    }

    pub fn resume_route(&self, route_id: &str) -> Result<(), RouteError> {
        self.transition(
            route_id,
            &[RouteState::Suspended],
            RouteState::Started,
            "resume",
            events::RESUMED,
        )
    }

    fn transition(
        &self,
        route_id: &str,
        from: &[RouteState],
        to: RouteState,
        action: &'static str,
        event: &str,
    ) -> Result<(), RouteError> {
        let routes = self.inner.routes.lock();
        let slot = routes
            .get(route_id)
            .ok_or_else(|| RouteError::UnknownRoute(route_id.to_owned()))?;
        let invalid = |state| RouteError::InvalidTransition {
            route: route_id.to_owned(),
            state,
            action,
        };
        let running = slot
            .running
            .as_ref()
            .ok_or_else(|| invalid(RouteState::Stopped))?;
        let events = self.events();
        running
            .gate
            .transition(from, to, || events.record(route_id, event, "", ""))
            .map_err(invalid)
    }

    pub fn stop_route(&self, route_id: &str) -> Result<(), RouteError> {
        let running = {
            let mut routes = self.inner.routes.lock();
            let slot = routes
                .get_mut(route_id)
                .ok_or_else(|| RouteError::UnknownRoute(route_id.to_owned()))?;
            slot.running
                .take()
                .ok_or_else(|| RouteError::InvalidTransition {
                    route: route_id.to_owned(),
                    state: RouteState::Stopped,
                    action: "stop",
                })?
        };
        self.finish(route_id, running, false);
        Ok(())
    }

    /// Stops the route if running, then starts it again.
    pub fn restart_route(&self, route_id: &str) -> Result<(), RouteError> {
        match self.stop_route(route_id) {
            Ok(()) | Err(RouteError::InvalidTransition { .. }) => self.start_route(route_id),
            Err(e) => Err(e),
        }
    }

    fn finish(&self, route_id: &str, mut running: RunningRoute, join: bool) {
        let events = self.events();
        let _ = running.gate.transition(
            &[RouteState::Started, RouteState::Suspended],
            RouteState::Stopped,
            || events.record(route_id, events::STOPPED, "", ""),
        );
        running.consumer.stop();
        if let Some(t) = running.thread.take() {
            if join && t.thread().id() != std::thread::current().id() {
                let _ = t.join();
            }
        }
    }

    /// Stops every route and waits for the route threads to exit. Must not
    /// be called from a route thread.
    pub fn shutdown(&self) {
        let running: Vec<(String, RunningRoute)> = {
            let mut routes = self.inner.routes.lock();
            routes
                .iter_mut()
                .filter_map(|(id, slot)| slot.running.take().map(|r| (id.clone(), r)))
                .collect()
        };
        for (id, r) in running {
            self.finish(&id, r, true);
        }
        self.inner.direct.write().clear();
    }

    /// Sends an exchange to an endpoint, as a producer template would.
    pub fn send(&self, uri: &str, x: Exchange) -> Result<Exchange, RouteError> {
        let uri = EndpointUri::parse(uri)?;
        self.component(&uri.scheme)?
            .create_producer(&uri, self)?
            .process(x)
    }

    pub fn send_body(&self, uri: &str, body: impl Into<BodyValue>) -> Result<Exchange, RouteError> {
        self.send(uri, Exchange::in_only(body))
    }

    pub fn receive_once(&self, uri: &str) -> Result<Option<Exchange>, RouteError> {
        let uri = EndpointUri::parse(uri)?;
        self.component(&uri.scheme)?.receive_once(&uri, self)
    }

    /// The mock endpoint `mock:name`, created on first use.
    pub fn mock(&self, name: &str) -> MockEndpoint {
        self.inner
            .mocks
            .lock()
            .entry(name.to_owned())
            .or_default()
            .clone()
    }

    /// Number of aggregation buckets still waiting in a route.
    pub fn pending_aggregates(&self, route_id: &str) -> usize {
        let routes = self.inner.routes.lock();
        routes
            .get(route_id)
            .and_then(|s| s.running.as_ref())
            .map_or(0, |r| {
                r.pipeline
                    .steps
                    .iter()
                    .map(|s| match s {
                        Step::Aggregate(a) => a.pending(),
                        _ => 0,
                    })
                    .sum()
            })
    }

    pub(crate) fn register_direct(&self, name: &str, inlet: RouteInlet) -> Result<(), RouteError> {
        let mut direct = self.inner.direct.write();
        if direct
            .get(name)
            .is_some_and(|i| i.state() != RouteState::Stopped)
        {
            return Err(RouteError::Config(format!(
                "direct:{name} already has a consumer"
            )));
        }
        direct.insert(name.to_owned(), inlet);
        Ok(())
    }

    pub(crate) fn unregister_direct(&self, name: &str) {
        self.inner.direct.write().remove(name);
    }

    pub(crate) fn direct_inlet(&self, name: &str) -> Option<RouteInlet> {
        self.inner.direct.read().get(name).cloned()
    }

    pub(crate) fn buffered_queue(&self, name: &str) -> (Sender<Exchange>, Receiver<Exchange>) {
        self.inner
            .buffered
            .lock()
            .entry(name.to_owned())
            .or_insert_with(crossbeam_channel::unbounded)
            .clone()
    }
}

fn spawn_route_thread(
    rx: Receiver<Inbound>,
    gate: Arc<Gate>,
    pipeline: Arc<Pipeline>,
) -> JoinHandle<()> {
    let name = format!("route-{}", pipeline.route_id);
    std::thread::Builder::new()
        .name(name)
        .spawn(move || {
            let ticks = pipeline.has_timeouts();
            loop {
                match rx.recv_timeout(TICK) {
                    Ok(Inbound { exchange, reply }) => {
                        let result = pipeline.run(exchange);
                        if let Some(reply) = reply {
                            let _ = reply.send(result);
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
                if ticks {
                    pipeline.flush_expired(Instant::now());
                }
                if gate.is_stopped() {
                    break;
                }
            }
        })
        .expect("spawn route thread")
}

/// Lifecycle handle for one route.
#[derive(Clone)]
pub struct RouteController {
    route_id: String,
    ctx: WeakContext,
}

impl RouteController {
    pub fn route_id(&self) -> &str {
        &self.route_id
    }

    fn ctx(&self) -> Result<RouteContext, RouteError> {
        self.ctx
            .upgrade()
            .ok_or_else(|| RouteError::UnknownRoute(self.route_id.clone()))
    }

    pub fn state(&self) -> Result<RouteState, RouteError> {
        self.ctx()?.route_state(&self.route_id)
    }

    pub fn start(&self) -> Result<(), RouteError> {
        self.ctx()?.start_route(&self.route_id)
    }

    pub fn suspend(&self) -> Result<(), RouteError> {
        self.ctx()?.suspend_route(&self.route_id)
    }

    pub fn resume(&self) -> Result<(), RouteError> {
        self.ctx()?.resume_route(&self.route_id)
    }

    pub fn stop(&self) -> Result<(), RouteError> {
        self.ctx()?.stop_route(&self.route_id)
    }
}

impl fmt::Debug for RouteController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RouteController")
            .field("route_id", &self.route_id)
            .finish()
    }
}

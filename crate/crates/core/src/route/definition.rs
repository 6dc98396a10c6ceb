//! Route definitions and the builder DSL used to construct them.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::RouteError;
use crate::expr::{Expr, ExprError};
use crate::message::{EndpointUri, Exchange};

/// Host hook for `process(...)` steps.
pub type ProcessFn =
    Arc<dyn Fn(Exchange, &super::ProcessContext) -> Result<Exchange, RouteError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum AggregationStrategy {
    /// Bodies collected into a `ListOf` in arrival order.
    ListAppend,
    /// Bodies read as term lists; the result is their sorted set union.
    SetUnion,
    /// Body (and headers) from the exchange lacking the named header, that
    /// header taken from the other.
    CombineBodyAndHeader(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Size(usize),
    /// Size read from each incoming exchange.
    SizeExpr(Expr),
    /// Measured from the bucket's first message.
    Timeout(Duration),
}

/// Insertion-ordered set of seen keys, evicting the oldest beyond capacity.
#[derive(Debug)]
pub struct IdempotentRepository {
    capacity: usize,
    order: VecDeque<String>,
    seen: HashSet<String>,
}

impl IdempotentRepository {
    pub fn new(capacity: usize) -> Self {
        assert!(
            capacity > 0,
            "idempotent repository capacity must be positive"
        );
        IdempotentRepository {
            capacity,
            order: VecDeque::with_capacity(capacity),
            seen: HashSet::with_capacity(capacity),
        }
    }

    /// Shared handle, as routes hold it.
    pub fn shared(capacity: usize) -> Arc<Mutex<Self>> {
        Arc::new(Mutex::new(Self::new(capacity)))
    }

    /// Records `key`; `true` when it had not been seen (the exchange passes).
    pub fn check_and_insert(&mut self, key: &str) -> bool {
        if self.seen.contains(key) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(key.to_owned());
        self.seen.insert(key.to_owned());
        true
    }

    pub fn contains(&self, key: &str) -> bool {
        self.seen.contains(key)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Clone)]
pub enum Processor {
    SetHeader {
        name: String,
        expr: Expr,
    },
    SetBody(Expr),
    /// Passes when the evaluated text equals `expected` (or differs, when
    /// `negate`).
    Filter {
        expr: Expr,
        expected: String,
        negate: bool,
    },
    To(Vec<EndpointUri>),
    Split(Expr),
    Aggregate {
        correlation: Expr,
        strategy: AggregationStrategy,
        completion: Completion,
    },
    IdempotentConsumer {
        key: Expr,
        repo: Arc<Mutex<IdempotentRepository>>,
    },
    TransformRowsToQuotedList {
        column: String,
    },
    Custom {
        name: String,
        hook: ProcessFn,
    },
}

impl fmt::Debug for Processor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Processor::SetHeader { name, expr } => write!(f, "setHeader({name}, {expr})"),
            Processor::SetBody(e) => write!(f, "setBody({e})"),
            Processor::Filter {
                expr,
                expected,
                negate,
            } => {
                write!(
                    f,
                    "filter({expr} {} {expected:?})",
                    if *negate { "!=" } else { "==" }
                )
            }
            Processor::To(uris) => {
                let list: Vec<String> = uris.iter().map(ToString::to_string).collect();
                write!(f, "to({})", list.join(", "))
            }
            Processor::Split(e) => write!(f, "split({e})"),
            Processor::Aggregate {
                correlation,
                strategy,
                completion,
            } => write!(f, "aggregate({correlation}, {strategy:?}, {completion:?})"),
            Processor::IdempotentConsumer { key, repo } => {
                write!(
                    f,
                    "idempotentConsumer({key}, capacity={})",
                    repo.lock().capacity()
                )
            }
            Processor::TransformRowsToQuotedList { column } => {
                write!(f, "transformRowsToQuotedList({column})")
            }
            Processor::Custom { name, .. } => write!(f, "process({name})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouteDefinition {
    pub route_id: String,
    pub from_uri: EndpointUri,
    pub steps: Vec<Processor>,
    pub auto_startup: bool,
}

/// Anything the builder accepts where an expression is expected.
pub trait IntoExpr {
    fn into_expr(self) -> Result<Expr, ExprError>;
}

impl IntoExpr for Expr {
    fn into_expr(self) -> Result<Expr, ExprError> {
        Ok(self)
    }
}

/// An expression given as template text, parsed when the route is built.
#[derive(Debug, Clone)]
pub struct Simple(pub String);

impl IntoExpr for Simple {
    fn into_expr(self) -> Result<Expr, ExprError> {
        Expr::parse(&self.0)
    }
}

pub fn simple(text: impl Into<String>) -> Simple {
    Simple(text.into())
}

pub fn constant(text: impl Into<String>) -> Expr {
    Expr::constant(text)
}

pub fn header(name: impl Into<String>) -> Expr {
    Expr::header(name)
}

pub fn body() -> Expr {
    Expr::body()
}

/// Fluent route construction mirroring the usual DSL verbs. Errors are
/// deferred to [`RouteBuilder::build`].
pub struct RouteBuilder {
    route_id: Option<String>,
    from: Result<EndpointUri, RouteError>,
    steps: Vec<Processor>,
    auto_startup: bool,
    error: Option<RouteError>,
}

impl RouteBuilder {
    pub fn from(uri: &str) -> Self {
        RouteBuilder {
            route_id: None,
            from: EndpointUri::parse(uri).map_err(RouteError::from),
            steps: Vec::new(),
            auto_startup: true,
            error: None,
        }
    }

    pub fn from_uri(uri: EndpointUri) -> Self {
        RouteBuilder {
            route_id: None,
            from: Ok(uri),
            steps: Vec::new(),
            auto_startup: true,
            error: None,
        }
    }

    pub fn route_id(mut self, id: impl Into<String>) -> Self {
        self.route_id = Some(id.into());
        self
    }

    /// Routes with auto-startup off are added stopped.
    pub fn auto_startup(mut self, on: bool) -> Self {
        self.auto_startup = on;
        self
    }

    fn fail(&mut self, e: RouteError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn expr(&mut self, e: impl IntoExpr) -> Expr {
        e.into_expr().unwrap_or_else(|err| {
            self.fail(err.into());
            Expr::constant("")
        })
    }

    pub fn set_header(mut self, name: impl Into<String>, e: impl IntoExpr) -> Self {
        let name = name.into();
        if name.is_empty() {
            self.fail(RouteError::Config("header names must be non-empty".into()));
        }
        let expr = self.expr(e);
        self.steps.push(Processor::SetHeader { name, expr });
        self
    }

    pub fn set_body(mut self, e: impl IntoExpr) -> Self {
        let expr = self.expr(e);
        self.steps.push(Processor::SetBody(expr));
        self
    }

    pub fn filter(mut self, e: impl IntoExpr, expected: impl Into<String>) -> Self {
        let expr = self.expr(e);
        self.steps.push(Processor::Filter {
            expr,
            expected: expected.into(),
            negate: false,
        });
        self
    }

    pub fn filter_not(mut self, e: impl IntoExpr, rejected: impl Into<String>) -> Self {
        let expr = self.expr(e);
        self.steps.push(Processor::Filter {
            expr,
            expected: rejected.into(),
            negate: true,
        });
        self
    }

    pub fn to(self, uri: &str) -> Self {
        self.to_all(&[uri])
    }

    /// Sends a copy to each destination in order.
    pub fn to_all(mut self, uris: &[&str]) -> Self {
        let mut parsed = Vec::with_capacity(uris.len());
        for u in uris {
            match EndpointUri::parse(u) {
                Ok(p) => parsed.push(p),
                Err(e) => self.fail(e.into()),
            }
        }
        if parsed.is_empty() && self.error.is_none() {
            self.fail(RouteError::Config("to() needs at least one uri".into()));
        }
        self.steps.push(Processor::To(parsed));
        self
    }

    pub fn split(mut self, e: impl IntoExpr) -> Self {
        let expr = self.expr(e);
        self.steps.push(Processor::Split(expr));
        self
    }

    pub fn aggregate(
        mut self,
        correlation: impl IntoExpr,
        strategy: AggregationStrategy,
        completion: Completion,
    ) -> Self {
        let correlation = self.expr(correlation);
        match &completion {
            Completion::Size(0) => self.fail(RouteError::Config(
                "completion size must be positive".into(),
            )),
            Completion::Timeout(d) if d.is_zero() => self.fail(RouteError::Config(
                "completion timeout must be positive".into(),
            )),
            _ => {}
        }
        self.steps.push(Processor::Aggregate {
            correlation,
            strategy,
            completion,
        });
        self
    }

    pub fn idempotent_consumer(
        mut self,
        key: impl IntoExpr,
        repo: Arc<Mutex<IdempotentRepository>>,
    ) -> Self {
        let key = self.expr(key);
        self.steps.push(Processor::IdempotentConsumer { key, repo });
        self
    }

    pub fn transform_rows_to_quoted_list(mut self, column: impl Into<String>) -> Self {
        self.steps.push(Processor::TransformRowsToQuotedList {
            column: column.into(),
        });
        self
    }

    pub fn process<F>(mut self, name: impl Into<String>, hook: F) -> Self
    where
        F: Fn(Exchange, &super::ProcessContext) -> Result<Exchange, RouteError>
            + Send
            + Sync
            + 'static,
    {
        self.steps.push(Processor::Custom {
            name: name.into(),
            hook: Arc::new(hook),
        });
        self
    }

    pub fn build(self) -> Result<RouteDefinition, RouteError> {
        let from_uri = self.from?;
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(RouteDefinition {
            route_id: self.route_id.unwrap_or_else(|| from_uri.base()),
            from_uri,
            steps: self.steps,
            auto_startup: self.auto_startup,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idempotent_keys_pass_once() {
        let mut repo = IdempotentRepository::new(100);
        let verdicts: Vec<bool> = ["a", "b", "a"]
            .iter()
            .map(|k| repo.check_and_insert(k))
            .collect();
        assert_eq!(verdicts, [true, true, false]);
    }

    #[test]
    fn idempotent_eviction() {
        // capacity 2: a, b fill it; c evicts a; a is then new again.
        let mut repo = IdempotentRepository::new(2);
        let verdicts: Vec<bool> = ["a", "b", "c", "a"]
            .iter()
            .map(|k| repo.check_and_insert(k))
            .collect();
        assert_eq!(verdicts, [true, true, true, true]);
        assert_eq!(repo.len(), 2);
        assert!(!repo.contains("b"));
        assert!(repo.contains("c"));
    }

    #[test]
    fn builder_defers_errors() {
        assert!(RouteBuilder::from("nope").build().is_err());
        let err = RouteBuilder::from("direct:a")
            .set_body(simple("${oops}"))
            .build();
        assert!(matches!(err, Err(RouteError::Expr(_))));
        let err = RouteBuilder::from("direct:a")
            .aggregate(
                header("id"),
                AggregationStrategy::ListAppend,
                Completion::Size(0),
            )
            .build();
        assert!(matches!(err, Err(RouteError::Config(_))));
        let def = RouteBuilder::from("direct:a").to("mock:b").build().unwrap();
        assert_eq!(def.route_id, "direct:a");
        assert_eq!(def.steps.len(), 1);
    }
}

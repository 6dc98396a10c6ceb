//! Enterprise-integration routing for multi-agent systems.
//!
//! Agents exchange messages, percepts and actions with the outside world
//! through `agent:` endpoints on ordinary integration routes.

pub mod agent;
pub mod expr;
pub mod message;
pub mod route;
pub mod services;
pub mod term;

pub use expr::{Expr, ExprError};
pub use message::{BodyValue, EndpointUri, Exchange, ExchangePattern, Headers, Message, RowSet};
pub use route::{RouteBuilder, RouteContext, RouteError, RouteState};
pub use term::{ActionTerm, Term, TermError};

//! Email-relevance scenario on top of `eip-agents`: relevance agents that
//! split the user accounts between them, routes that poll a shared mail
//! account and forward each mail to the users it concerns, and an optional
//! broker bridge between containers.

pub mod allocation;
pub mod behavior;
pub mod config;
pub mod routes;
pub mod scenario;

pub use allocation::{compute_allocation, AllocationError, AllocationView};
pub use config::{default_scenario, ConfigError, ScenarioConfig};
pub use scenario::{Forward, Scenario, ScenarioError};

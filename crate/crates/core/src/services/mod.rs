//! Simulated external services exposed as endpoint components.

pub mod broker;
pub mod coord;
pub mod mail;
pub mod records;
pub mod table;
pub mod timer;

use std::sync::Arc;

use crate::route::RouteContext;

pub use broker::{Broker, BrokerComponent};
pub use coord::{CoordComponent, CoordError, Coordinator, CreateMode, SessionId};
pub use mail::{MailComponent, MailStore, MailtoComponent};
pub use records::{parse_records, Record, RecordError};
pub use table::{TableComponent, TableError, TableStore};
pub use timer::TimerComponent;

/// The services one deployment shares across containers.
#[derive(Clone)]
pub struct Services {
    pub broker: Broker,
    pub coord: Coordinator,
    pub mail: MailStore,
    pub tables: TableStore,
}

impl Services {
    /// Fresh services; the table store is the data source `datasource`.
    pub fn new(datasource: &str) -> Self {
        let broker = Broker::new();
        Services {
            tables: TableStore::new(datasource, Some(broker.clone())),
            broker,
            coord: Coordinator::new(),
            mail: MailStore::new(),
        }
    }

    /// Registers `broker`, `coord`, `mail`, `mailto`, `table` and `timer`
    /// on `ctx`. Coordination calls use `session`.
    pub fn install(&self, ctx: &RouteContext, session: SessionId) {
        ctx.add_component(
            "broker",
            Arc::new(BrokerComponent::new(self.broker.clone())),
        );
        ctx.add_component(
            "coord",
            Arc::new(CoordComponent::new(self.coord.clone(), session)),
        );
        ctx.add_component("mail", Arc::new(MailComponent::new(self.mail.clone())));
        ctx.add_component("mailto", Arc::new(MailtoComponent::new(self.mail.clone())));
        ctx.add_component("table", Arc::new(TableComponent::new(self.tables.clone())));
        ctx.add_component("timer", timer::component());
    }
}

//! A running deployment: shared services, containers with their routes,
//! and relevance agents.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use eip_agents::agent::{AgentError, BehaviorRule, Container, ContainerConfig};
use eip_agents::route::events::FORWARD;
use eip_agents::route::EventLog;
use eip_agents::services::table::TableError;
use eip_agents::services::Services;
use eip_agents::RouteError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::{debug, info};

use crate::allocation::AllocationView;
use crate::behavior::{allocation_of, relevance_rules, RelevanceOptions};
use crate::config::{AgentSpec, ScenarioConfig};
use crate::routes::{build_route_sets, ContainerRole, ACCOUNT_TOPIC, PLAN_TOPIC};

pub const USERS_TABLE: &str = "users";
pub const PLANS_TABLE: &str = "plans";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("no container `{0}`")]
    UnknownContainer(String),
    #[error("scenario has no containers")]
    NoContainers,
}

/// One forwarded copy, as recorded in the event log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Forward {
    pub to: String,
    pub subject: String,
}

impl Forward {
    fn parse(detail: &str) -> Option<Forward> {
        let rest = detail.strip_prefix("to=")?;
        let (to, subject) = rest.split_once(" subject=")?;
        Some(Forward {
            to: to.to_owned(),
            subject: subject.to_owned(),
        })
    }
}

pub struct Scenario {
    cfg: ScenarioConfig,
    services: Services,
    events: EventLog,
    containers: Vec<Container>,
    /// Indices into `containers` still running.
    live: BTreeSet<usize>,
    mail_container: usize,
}

fn rules_for(spec: &AgentSpec) -> Vec<BehaviorRule> {
    match spec.behavior.as_str() {
        "idle" => Vec::new(),
        _ => relevance_rules(RelevanceOptions {
            register_twice: spec.register_twice,
        }),
    }
}

impl Scenario {
    /// Creates services, containers, routes and agents. Nothing runs until
    /// [`Scenario::start`]. `seed` fixes the order agents are added in.
    pub fn build(cfg: ScenarioConfig, events: EventLog, seed: u64) -> Result<Self, ScenarioError> {
        if cfg.containers.is_empty() {
            return Err(ScenarioError::NoContainers);
        }
        let services = Services::new(&cfg.datasource);
        services.mail.create_account(&cfg.mail_account);
        let tables = &services.tables;
        tables.create_table(USERS_TABLE, &["email"])?;
        tables.create_table(PLANS_TABLE, &["email", "keywords"])?;
        tables.notify_changes(USERS_TABLE, "email", ACCOUNT_TOPIC, "account")?;
        tables.notify_changes(PLANS_TABLE, "email", PLAN_TOPIC, "plan")?;
        for u in &cfg.users {
            services.mail.create_account(&u.email);
            tables.insert(USERS_TABLE, &[("email", u.email.as_str())])?;
            tables.insert(
                PLANS_TABLE,
                &[
                    ("email", u.email.as_str()),
                    ("keywords", &u.interests.join(",")),
                ],
            )?;
        }

        let mail_container = cfg.mail_container();
        let has_peers = cfg.containers.len() > 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut containers = Vec::with_capacity(cfg.containers.len());
        for (i, spec) in cfg.containers.iter().enumerate() {
            let base = match (&spec.id, spec.dynamic) {
                (Some(id), false) => ContainerConfig::fixed(id.clone()),
                _ => ContainerConfig::dynamic(),
            };
            let ccfg = base
                .sync_timeout(Duration::from_millis(cfg.sync_timeout_ms))
                .direct_delivery(cfg.direct_delivery);
            let container = Container::new(ccfg, Some(&services), events.clone())?;
            let role = ContainerRole {
                id: container.id().to_owned(),
                polls_mail: i == mail_container,
                has_peers,
            };
            // Routes first, so agents' startup actions find their consumers.
            for def in build_route_sets(&cfg, &role)? {
                container.context().add_route(def)?;
            }
            let mut agents: Vec<&AgentSpec> = spec.agents.iter().collect();
            agents.shuffle(&mut rng);
            for a in agents {
                container.add_agent(&a.name, rules_for(a))?;
            }
            info!(
                container = container.id(),
                agents = spec.agents.len(),
                "container ready"
            );
            containers.push(container);
        }
        let live = (0..containers.len()).collect();
        Ok(Scenario {
            cfg,
            services,
            events,
            containers,
            live,
            mail_container,
        })
    }

    pub fn start(&self) {
        for c in &self.containers {
            c.start();
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn services(&self) -> &Services {
        &self.services
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn containers(&self) -> impl Iterator<Item = &Container> {
        self.live.iter().map(|&i| &self.containers[i])
    }

    pub fn container(&self, id: &str) -> Option<&Container> {
        self.containers().find(|c| c.id() == id)
    }

    pub fn mail_container(&self) -> &Container {
        &self.containers[self.mail_container]
    }

    /// Full names of the agents in live containers.
    pub fn agent_names(&self) -> BTreeSet<String> {
        self.containers().flat_map(Container::agent_names).collect()
    }

    /// Each live relevance agent's current allocation belief.
    pub fn allocations(&self) -> BTreeMap<String, Option<AllocationView>> {
        let mut out = BTreeMap::new();
        for (ci, c) in self.live.iter().map(|&i| (i, &self.containers[i])) {
            for spec in &self.cfg.containers[ci].agents {
                if spec.behavior == "idle" {
                    continue;
                }
                let full = format!("{}__{}", c.id(), spec.name);
                let view = c
                    .with_agent(&full, |st| allocation_of(st.beliefs()))
                    .ok()
                    .flatten();
                out.insert(full, view);
            }
        }
        out
    }

    /// Accounts currently in the users table.
    pub fn accounts(&self) -> Vec<String> {
        self.services
            .tables
            .snapshot(USERS_TABLE)
            .map(|t| t.rows.iter().map(|r| r[0].clone()).collect())
            .unwrap_or_default()
    }

    /// All live relevance agents agree on one allocation covering each of
    /// them and exactly the current accounts.
    pub fn is_settled(&self) -> bool {
        let views = self.allocations();
        let mut it = views.values();
        let Some(Some(first)) = it.next() else {
            return false;
        };
        let agents: BTreeSet<String> = first.agents().cloned().collect();
        let relevance: BTreeSet<String> = views.keys().cloned().collect();
        it.all(|v| v.as_ref() == Some(first))
            && agents == relevance
            && first.is_partition_of(&self.accounts())
    }

    pub fn wait_settled(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_settled() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Delivers a mail to the shared account (or `to`); returns its id.
    pub fn inject_mail(&self, to: Option<&str>, from: &str, subject: &str, body: &str) -> String {
        let account = to.unwrap_or(&self.cfg.mail_account);
        if !self.services.mail.has_account(account) {
            self.services.mail.create_account(account);
        }
        debug!(account, subject, "inject mail");
        self.services.mail.deliver(account, from, subject, body)
    }

    /// Injects every mail listed in the config.
    pub fn inject_fixture_mail(&self) -> usize {
        let mail = self.cfg.mail.clone();
        for m in &mail {
            self.inject_mail(m.to.as_deref(), &m.from, &m.subject, &m.body);
        }
        mail.len()
    }

    /// Stops a container and expires its coordination session, so its
    /// registrations disappear.
    pub fn kill_container(&mut self, id: &str) -> Result<(), ScenarioError> {
        let idx = self
            .live
            .iter()
            .copied()
            .find(|&i| self.containers[i].id() == id)
            .ok_or_else(|| ScenarioError::UnknownContainer(id.to_owned()))?;
        let c = &self.containers[idx];
        c.shutdown();
        c.expire_session()?;
        self.live.remove(&idx);
        info!(container = id, "container expired");
        Ok(())
    }

    /// Waits until no event has been logged for three aggregation
    /// timeouts, or `max` elapses.
    pub fn wait_quiescent(&self, max: Duration) {
        let quiet = Duration::from_millis(self.cfg.aggregation_timeout_ms * 3);
        let deadline = Instant::now() + max;
        while Instant::now() < deadline && self.events.idle_for() < quiet {
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Forwarded copies so far, sorted.
    pub fn forwards(&self) -> Vec<Forward> {
        forwards_in(&self.events)
    }

    pub fn shutdown(&self) {
        for c in self.containers() {
            c.shutdown();
        }
    }
}

impl Drop for Scenario {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn forwards_in(events: &EventLog) -> Vec<Forward> {
    let mut out: Vec<Forward> = events
        .of_kind(FORWARD)
        .iter()
        .filter_map(|e| Forward::parse(&e.detail))
        .collect();
    out.sort();
    out
}

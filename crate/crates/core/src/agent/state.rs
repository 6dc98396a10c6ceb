use std::collections::BTreeMap;

use super::{
    AgentEffect, AgentId, AgentMessage, AgentView, BehaviorRule, Payload, PerceptEntry,
    Persistence, Trigger, UpdateMode,
};
use crate::term::Term;

/// Everything one agent owns. The container guards it with a lock; the
/// agent's own cycle is the only reader of the queues.
#[derive(Debug)]
pub struct AgentState {
    id: AgentId,
    rules: Vec<BehaviorRule>,
    beliefs: BTreeMap<String, Term>,
    inbox: Vec<AgentMessage>,
    transient: Vec<Term>,
    persistent: Vec<Term>,
    seen_persistent: Vec<Term>,
    results: Vec<Term>,
    started: bool,
}

#[derive(Debug, Default)]
pub struct CycleOutput {
    pub effects: Vec<AgentEffect>,
    pub fired: Vec<String>,
    pub errors: Vec<(String, String)>,
}

impl CycleOutput {
    pub fn is_idle(&self) -> bool {
        self.fired.is_empty() && self.errors.is_empty()
    }
}

fn same_key(a: &Term, b: &Term) -> bool {
    a.functor_arity().is_some() && a.functor_arity() == b.functor_arity()
}

impl AgentState {
    pub fn new(id: AgentId, rules: Vec<BehaviorRule>) -> Self {
        AgentState {
            id,
            rules,
            beliefs: BTreeMap::new(),
            inbox: Vec::new(),
            transient: Vec::new(),
            persistent: Vec::new(),
            seen_persistent: Vec::new(),
            results: Vec::new(),
            started: false,
        }
    }

    pub fn id(&self) -> &AgentId {
        &self.id
    }

    pub fn deliver_percept(&mut self, entry: PerceptEntry) {
        if entry.update_mode == UpdateMode::ReplaceSameFunctorArity {
            self.transient.retain(|t| !same_key(t, &entry.literal));
            self.persistent.retain(|t| !same_key(t, &entry.literal));
        }
        match entry.persistence {
            Persistence::Transient => self.transient.push(entry.literal),
            Persistence::Persistent => {
                if !self.persistent.contains(&entry.literal) {
                    self.persistent.push(entry.literal);
                }
            }
        }
    }

    pub fn push_message(&mut self, msg: AgentMessage) {
        self.inbox.push(msg);
    }

    pub fn push_action_result(&mut self, term: Term) {
        self.results.push(term);
    }

    pub fn has_pending(&self) -> bool {
        !self.started
            || !self.inbox.is_empty()
            || !self.transient.is_empty()
            || !self.results.is_empty()
            || self.persistent != self.seen_persistent
    }

    pub fn inbox(&self) -> &[AgentMessage] {
        &self.inbox
    }

    pub fn transient_percepts(&self) -> &[Term] {
        &self.transient
    }

    pub fn persistent_percepts(&self) -> &[Term] {
        &self.persistent
    }

    pub fn beliefs(&self) -> &BTreeMap<String, Term> {
        &self.beliefs
    }

    pub fn set_belief(&mut self, key: impl Into<String>, value: Term) {
        self.beliefs.insert(key.into(), value);
    }

    pub fn belief(&self, key: &str) -> Option<&Term> {
        self.beliefs.get(key)
    }

    /// One reasoning cycle: startup rules (first cycle only), completed
    /// action results, drained transient percepts, persistent percepts new
    /// since the last cycle, then the drained inbox.
    pub fn cycle(&mut self) -> CycleOutput {
        let mut out = CycleOutput::default();
        if !self.started {
            self.started = true;
            self.fire(
                &mut out,
                |t| matches!(t, Trigger::OnStartup),
                Payload::Startup,
            );
        }
        for r in std::mem::take(&mut self.results) {
            let functor = r.functor_arity().map(|(f, _)| f.to_owned());
            self.fire(
                &mut out,
                |t| matches!(t, Trigger::OnActionResult { functor: f } if Some(f) == functor.as_ref()),
                Payload::ActionResult(&r),
            );
        }
        let fresh: Vec<Term> = self
            .persistent
            .iter()
            .filter(|p| !self.seen_persistent.contains(p))
            .cloned()
            .collect();
        self.seen_persistent = self.persistent.clone();
        let transient = std::mem::take(&mut self.transient);
        for p in transient.iter().chain(&fresh) {
            let key = p.functor_arity().map(|(f, a)| (f.to_owned(), a));
            self.fire(
                &mut out,
                |t| matches!(t, Trigger::OnPercept { functor, arity } if Some((functor, *arity)) == key.as_ref().map(|(f, a)| (f, *a))),
                Payload::Percept(p),
            );
        }
        for m in std::mem::take(&mut self.inbox) {
            let functor = m.content.functor_arity().map(|(f, _)| f.to_owned());
            self.fire(
                &mut out,
                |t| {
                    matches!(t, Trigger::OnMessage { illoc_force, functor: f }
                        if *illoc_force == m.illoc_force && (f.is_none() || *f == functor))
                },
                Payload::Message(&m),
            );
        }
        out
    }

    fn fire(
        &mut self,
        out: &mut CycleOutput,
        selects: impl Fn(&Trigger) -> bool,
        payload: Payload<'_>,
    ) {
        for i in 0..self.rules.len() {
            if !selects(&self.rules[i].trigger) {
                continue;
            }
            let rule = self.rules[i].clone();
            let result = {
                let view = AgentView {
                    id: &self.id,
                    beliefs: &self.beliefs,
                    percepts: &self.persistent,
                };
                (rule.hook)(&view, payload)
            };
            match result {
                Ok(effects) => {
                    out.fired.push(rule.name.clone());
                    for e in effects {
                        match e {
                            AgentEffect::UpdateInternal { key, value } => {
                                self.beliefs.insert(key, value);
                            }
                            other => out.effects.push(other),
                        }
                    }
                }
                Err(e) => {
                    tracing::warn!(agent = %self.id, rule = %rule.name, "hook failed: {e}");
                    out.errors.push((rule.name.clone(), e));
                }
            }
        }
    }
}

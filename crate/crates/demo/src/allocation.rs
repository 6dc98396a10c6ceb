//! The account-allocation rule every agent runs: sorted account `i` goes to
//! sorted agent `i mod n`.

use std::collections::{BTreeMap, BTreeSet};

use eip_agents::Term;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocationError {
    #[error("cannot allocate accounts to an empty agent list")]
    EmptyAgentList,
    #[error("malformed allocation term: {0}")]
    Malformed(String),
}

/// Agent full name to its sorted accounts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationView(pub BTreeMap<String, Vec<String>>);

pub fn compute_allocation(
    agents: &[String],
    accounts: &[String],
) -> Result<AllocationView, AllocationError> {
    let agents: Vec<&String> = agents.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if agents.is_empty() {
        return Err(AllocationError::EmptyAgentList);
    }
    let accounts: BTreeSet<&String> = accounts.iter().collect();
    let mut view: BTreeMap<String, Vec<String>> =
        agents.iter().map(|a| ((*a).clone(), Vec::new())).collect();
    for (i, acc) in accounts.into_iter().enumerate() {
        let owner = agents[i % agents.len()];
        view.get_mut(owner)
            .expect("owner is a key")
            .push(acc.clone());
    }
    Ok(AllocationView(view))
}

impl AllocationView {
    pub fn accounts_of(&self, agent: &str) -> &[String] {
        self.0.get(agent).map_or(&[], Vec::as_slice)
    }

    pub fn agents(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Disjoint assignments whose union is exactly `accounts`.
    pub fn is_partition_of(&self, accounts: &[String]) -> bool {
        let mut seen = BTreeSet::new();
        for acc in self.0.values().flatten() {
            if !seen.insert(acc) {
                return false;
            }
        }
        seen == accounts.iter().collect()
    }

    /// `[assigned("agent", ["u1", ...]), ...]`
    pub fn to_term(&self) -> Term {
        Term::List(
            self.0
                .iter()
                .map(|(agent, accs)| {
                    Term::compound(
                        "assigned",
                        vec![
                            Term::string(agent.as_str()),
                            Term::List(accs.iter().map(|a| Term::string(a.as_str())).collect()),
                        ],
                    )
                })
                .collect(),
        )
    }

    pub fn from_term(t: &Term) -> Result<Self, AllocationError> {
        let bad = || AllocationError::Malformed(t.to_string());
        let Term::List(items) = t else {
            return Err(bad());
        };
        let mut view = BTreeMap::new();
        for item in items {
            match (item.functor_arity(), item.args()) {
                (Some(("assigned", 2)), [agent, Term::List(accs)]) => {
                    view.insert(agent.as_text(), accs.iter().map(Term::as_text).collect());
                }
                _ => return Err(bad()),
            }
        }
        Ok(AllocationView(view))
    }
}

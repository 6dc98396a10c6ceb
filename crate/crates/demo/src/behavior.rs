//! Behaviour of the relevance agents: load accounts and plans on startup,
//! register, track membership, split the accounts, and answer
//! `check_relevance` requests for the accounts they own.

use std::time::Duration;

use eip_agents::agent::{ActionMode, AgentEffect, AgentView, BehaviorRule, Payload, Trigger};
use eip_agents::Term;

use crate::allocation::{compute_allocation, AllocationView};

pub const ROUTER: &str = "router";

pub mod belief {
    pub const ACCOUNTS: &str = "accounts";
    pub const AGENTS: &str = "agents";
    pub const PLANS: &str = "plans";
    pub const ALLOCATION: &str = "allocation";
    pub const MINE: &str = "mine";
}

/// Options of the relevance behaviour.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelevanceOptions {
    pub register_twice: bool,
}

fn sync() -> ActionMode {
    // Zero picks the container's configured timeout.
    ActionMode::Sync(Duration::ZERO)
}

fn fetch_accounts() -> AgentEffect {
    AgentEffect::act(
        Term::compound("get_email_accounts", vec![Term::var("Accounts")]),
        sync(),
    )
}

fn fetch_plans() -> AgentEffect {
    AgentEffect::act(
        Term::compound("get_plans", vec![Term::var("Plans")]),
        sync(),
    )
}

pub fn texts(t: &Term) -> Vec<String> {
    match t {
        Term::List(items) => items.iter().map(Term::as_text).collect(),
        _ => Vec::new(),
    }
}

fn first_arg(t: &Term) -> Result<&Term, String> {
    t.args()
        .first()
        .ok_or_else(|| format!("`{t}` has no arguments"))
}

/// Recomputes the allocation from the known agents and accounts.
fn reallocate(
    view: &AgentView<'_>,
    agents: Option<&Term>,
    accounts: Option<&Term>,
) -> Vec<AgentEffect> {
    let agents = agents
        .or_else(|| view.belief(belief::AGENTS))
        .map(texts)
        .unwrap_or_default();
    let accounts = accounts
        .or_else(|| view.belief(belief::ACCOUNTS))
        .map(texts)
        .unwrap_or_default();
    let Ok(alloc) = compute_allocation(&agents, &accounts) else {
        return Vec::new();
    };
    let mine = alloc
        .accounts_of(&view.id.full_name())
        .iter()
        .map(|a| Term::string(a.as_str()))
        .collect();
    vec![
        AgentEffect::believe(belief::ALLOCATION, alloc.to_term()),
        AgentEffect::believe(belief::MINE, Term::List(mine)),
    ]
}

/// Keywords per account from a `[plan("u@x", ["k1", ...]), ...]` term.
fn keywords_of(plans: &Term, account: &str) -> Vec<String> {
    let Term::List(items) = plans else {
        return Vec::new();
    };
    items
        .iter()
        .filter(|p| p.functor_arity() == Some(("plan", 2)) && p.args()[0].as_text() == account)
        .flat_map(|p| texts(&p.args()[1]))
        .collect()
}

/// Accounts among `mine` whose keywords occur in the subject or body,
/// compared case-insensitively.
pub fn relevant_accounts(mine: &[String], plans: &Term, subject: &str, body: &str) -> Vec<String> {
    let text = format!("{subject}\n{body}").to_lowercase();
    let mut out: Vec<String> = mine
        .iter()
        .filter(|acc| {
            keywords_of(plans, acc)
                .iter()
                .any(|k| !k.is_empty() && text.contains(&k.to_lowercase()))
        })
        .cloned()
        .collect();
    out.sort();
    out
}

fn percept_rule(name: &str, functor: &str, hook: fn() -> AgentEffect) -> BehaviorRule {
    BehaviorRule::new(
        name,
        Trigger::OnPercept {
            functor: functor.into(),
            arity: 1,
        },
        move |_, _| Ok(vec![hook()]),
    )
}

pub fn relevance_rules(opts: RelevanceOptions) -> Vec<BehaviorRule> {
    vec![
        BehaviorRule::new("startup", Trigger::OnStartup, move |_, _| {
            let mut effects = vec![
                fetch_accounts(),
                fetch_plans(),
                AgentEffect::act(Term::atom("register"), ActionMode::Async),
            ];
            if opts.register_twice {
                effects.push(AgentEffect::act(Term::atom("register"), ActionMode::Async));
            }
            Ok(effects)
        }),
        BehaviorRule::new(
            "record-accounts",
            Trigger::OnActionResult {
                functor: "get_email_accounts".into(),
            },
            |view, p| {
                let Payload::ActionResult(t) = p else {
                    return Ok(vec![]);
                };
                let accounts = first_arg(t)?.clone();
                let mut effects = reallocate(view, None, Some(&accounts));
                effects.insert(0, AgentEffect::believe(belief::ACCOUNTS, accounts));
                Ok(effects)
            },
        ),
        BehaviorRule::new(
            "record-plans",
            Trigger::OnActionResult {
                functor: "get_plans".into(),
            },
            |_, p| {
                let Payload::ActionResult(t) = p else {
                    return Ok(vec![]);
                };
                Ok(vec![AgentEffect::believe(
                    belief::PLANS,
                    first_arg(t)?.clone(),
                )])
            },
        ),
        BehaviorRule::new(
            "membership",
            Trigger::OnPercept {
                functor: "agents".into(),
                arity: 1,
            },
            |view, p| {
                let Payload::Percept(t) = p else {
                    return Ok(vec![]);
                };
                let agents = first_arg(t)?.clone();
                let mut effects = reallocate(view, Some(&agents), None);
                effects.insert(0, AgentEffect::believe(belief::AGENTS, agents));
                Ok(effects)
            },
        ),
        percept_rule("account-added", "account_added", fetch_accounts),
        percept_rule("account-removed", "account_removed", fetch_accounts),
        percept_rule("plan-added", "plan_added", fetch_plans),
        percept_rule("plan-removed", "plan_removed", fetch_plans),
        percept_rule("plan-updated", "plan_updated", fetch_plans),
        BehaviorRule::new(
            "check-relevance",
            Trigger::OnMessage {
                illoc_force: "achieve".into(),
                functor: Some("check_relevance".into()),
            },
            |view, p| {
                let Payload::Message(m) = p else {
                    return Ok(vec![]);
                };
                let [id, _from, subject, body] = m.content.args() else {
                    return Err(format!(
                        "check_relevance needs 4 arguments, got `{}`",
                        m.content
                    ));
                };
                let mine = view.belief(belief::MINE).map(texts).unwrap_or_default();
                let plans = view
                    .belief(belief::PLANS)
                    .cloned()
                    .unwrap_or(Term::List(vec![]));
                let users = relevant_accounts(&mine, &plans, &subject.as_text(), &body.as_text());
                let reply = Term::compound(
                    "relevant",
                    vec![
                        id.clone(),
                        Term::List(users.into_iter().map(Term::string).collect()),
                    ],
                );
                Ok(vec![AgentEffect::tell(ROUTER, reply)])
            },
        ),
    ]
}

/// Reads an agent's allocation belief.
pub fn allocation_of(beliefs: &std::collections::BTreeMap<String, Term>) -> Option<AllocationView> {
    beliefs
        .get(belief::ALLOCATION)
        .and_then(|t| AllocationView::from_term(t).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use eip_agents::term::parse_term;

    #[test]
    fn keyword_match_is_case_insensitive() {
        let plans =
            parse_term(r#"[plan("a@x", ["Budget"]), plan("b@x", ["hiring"]), plan("c@x", [])]"#)
                .unwrap();
        let mine = vec!["a@x".to_owned(), "b@x".to_owned(), "c@x".to_owned()];
        assert_eq!(
            relevant_accounts(&mine, &plans, "budget review", ""),
            ["a@x"]
        );
        assert!(relevant_accounts(&mine, &plans, "lunch", "").is_empty());
        assert_eq!(
            relevant_accounts(&mine[1..], &plans, "", "we are HIRING"),
            ["b@x"]
        );
    }

    #[test]
    fn only_owned_accounts_are_considered() {
        let plans = parse_term(r#"[plan("a@x", ["budget"])]"#).unwrap();
        assert!(relevant_accounts(&[], &plans, "budget", "").is_empty());
    }
}

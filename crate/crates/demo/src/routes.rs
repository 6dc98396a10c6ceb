//! Route sets for the email-relevance process and the inter-container
//! bridge.

use std::time::Duration;

use eip_agents::message::BodyValue;
use eip_agents::route::{
    body, constant, header, simple, AggregationStrategy, Completion, IdempotentRepository,
    RouteDefinition,
};
use eip_agents::services::broker::DESTINATION_HEADER;
use eip_agents::term::quote;
use eip_agents::{RouteBuilder, RouteError, Term};

use crate::behavior::ROUTER;
use crate::config::ScenarioConfig;

pub mod ids {
    pub const ACCOUNT_QUERY: &str = "account-query";
    pub const PLAN_QUERY: &str = "plan-query";
    pub const REGISTER: &str = "register";
    pub const MEMBERSHIP: &str = "membership";
    pub const MAIL_POLL: &str = "mail-poll";
    pub const ASK_AGENTS: &str = "ask-agents";
    pub const AGENT_REPLIES: &str = "agent-replies";
    pub const REMOTE_REPLIES: &str = "remote-replies";
    pub const COLLECT_REPLIES: &str = "collect-replies";
    pub const FORWARD: &str = "forward-message";
    pub const REMOTE_ASK: &str = "remote-ask";
    pub const RELAY_REPLIES: &str = "relay-replies";
    pub const ACCOUNT_CHANGES: &str = "account-changes";
    pub const PLAN_CHANGES: &str = "plan-changes";
    pub const SUSPEND_ON_ACCOUNT: &str = "suspend-on-account-change";
    pub const SUSPEND_ON_PLAN: &str = "suspend-on-plan-change";
    pub const RESUME_TIMER: &str = "resume-timer";
    pub const BRIDGE_OUT: &str = "bridge-out";
    pub const BRIDGE_IN: &str = "bridge-in";
}

pub const ACCOUNT_TOPIC: &str = "account-changes";
pub const PLAN_TOPIC: &str = "plan-changes";
pub const ASK_TOPIC: &str = "ask-agents";
pub const REPLY_QUEUE: &str = "relevance-replies";

/// Where a container sits in the deployment.
#[derive(Debug, Clone)]
pub struct ContainerRole {
    pub id: String,
    pub polls_mail: bool,
    /// Other containers exist, so requests and replies cross the broker.
    pub has_peers: bool,
}

/// All route definitions for one container, in start order.
pub fn build_route_sets(
    cfg: &ScenarioConfig,
    role: &ContainerRole,
) -> Result<Vec<RouteDefinition>, RouteError> {
    let mut routes = Vec::new();
    if cfg.routes.use_case {
        routes.extend(account_routes(cfg)?);
        routes.extend(membership_routes(cfg)?);
        routes.extend(change_routes()?);
        if role.polls_mail {
            routes.extend(mail_routes(cfg, role.has_peers)?);
            routes.extend(lifecycle_routes(cfg)?);
        } else {
            routes.extend(peer_routes()?);
        }
    }
    if cfg.routes.inter_container {
        routes.extend(bridge_routes(&role.id)?);
    }
    Ok(routes)
}

/// An action run as a table query whose result is bound to the action's
/// first argument.
pub fn account_routes(cfg: &ScenarioConfig) -> Result<Vec<RouteDefinition>, RouteError> {
    let table = format!("table:{}", cfg.datasource);
    Ok(vec![
        RouteBuilder::from("agent:action?exchangePattern=InOut&actionName=get_email_accounts&resultHeaderMap=result:1")
            .route_id(ids::ACCOUNT_QUERY)
            .set_body(constant("select email from users"))
            .to(&table)
            .transform_rows_to_quoted_list("email")
            .set_header("result", body())
            .build()?,
        RouteBuilder::from("agent:action?exchangePattern=InOut&actionName=get_plans&resultHeaderMap=result:1")
            .route_id(ids::PLAN_QUERY)
            .set_body(constant("select email, keywords from plans"))
            .to(&table)
            .process("rows-to-plans", |mut x, _| {
                let plans = rows_to_plans(x.body())?;
                x.set_body(plans);
                Ok(x)
            })
            .set_header("result", body())
            .build()?,
    ])
}

/// `[plan("u@x", ["k1","k2"]), ...]` from `email`/`keywords` rows.
pub fn rows_to_plans(rows: &BodyValue) -> Result<String, RouteError> {
    let BodyValue::RowSet(rs) = rows else {
        return Err(RouteError::TypeMismatch(format!(
            "expected rows, got `{rows}`"
        )));
    };
    let plans = (0..rs.len())
        .map(|i| {
            let email = rs
                .get(i, "email")
                .ok_or_else(|| RouteError::MissingColumn("email".into()))?;
            let keywords = rs
                .get(i, "keywords")
                .ok_or_else(|| RouteError::MissingColumn("keywords".into()))?;
            let kws = keywords
                .split(',')
                .map(str::trim)
                .filter(|k| !k.is_empty())
                .map(Term::string)
                .collect();
            Ok(Term::compound(
                "plan",
                vec![Term::string(email), Term::List(kws)],
            ))
        })
        .collect::<Result<Vec<_>, RouteError>>()?;
    Ok(Term::List(plans).to_string())
}

/// Registration as ephemeral-sequential nodes, and the membership watch
/// that turns the node list into an `agents([...])` percept.
pub fn membership_routes(cfg: &ScenarioConfig) -> Result<Vec<RouteDefinition>, RouteError> {
    let server = cfg.coord_server.clone();
    let node_base = format!("coord://{server}/agents/");
    Ok(vec![
        RouteBuilder::from("agent:action?actionName=register")
            .route_id(ids::REGISTER)
            .idempotent_consumer(header("actor"), IdempotentRepository::shared(100))
            .set_body(header("actor"))
            .to(&format!(
                "coord://{server}/agents/agent?create=true&createMode=EPHEMERAL_SEQUENTIAL"
            ))
            .build()?,
        RouteBuilder::from(&format!(
            "coord://{server}/agents?listChildren=true&repeat=true&create=true"
        ))
        .route_id(ids::MEMBERSHIP)
        .set_header("numChildren", simple("${body.size}"))
        .set_header("watchId", simple("${id}"))
        .split(body())
        .process("node-to-agent", move |mut x, ctx| {
            let name = ctx.receive_body(&format!("{node_base}{}", x.body()))?;
            x.set_body(name);
            Ok(x)
        })
        .aggregate(
            header("watchId"),
            AggregationStrategy::ListAppend,
            Completion::SizeExpr(header("numChildren")),
        )
        .set_body(simple("agents(${bodyAs(String)})"))
        .to("agent:percept?persistent=true&updateMode=-+")
        .build()?,
    ])
}

/// Account and plan change notifications become transient percepts.
pub fn change_routes() -> Result<Vec<RouteDefinition>, RouteError> {
    Ok(vec![
        RouteBuilder::from(&format!("broker:topic:{ACCOUNT_TOPIC}"))
            .route_id(ids::ACCOUNT_CHANGES)
            .to("agent:percept")
            .build()?,
        RouteBuilder::from(&format!("broker:topic:{PLAN_TOPIC}"))
            .route_id(ids::PLAN_CHANGES)
            .to("agent:percept")
            .build()?,
    ])
}

fn escape(s: &str) -> String {
    let q = quote(s);
    q[1..q.len() - 1].to_owned()
}

pub const CHECK_RELEVANCE: &str =
    r#"check_relevance(${header.id}, "${header.from}", "${header.subject}", "${bodyAs(String)}")"#;

/// Poll the shared account, ask the agents, union their replies, and
/// forward the mail to the result.
pub fn mail_routes(
    cfg: &ScenarioConfig,
    has_peers: bool,
) -> Result<Vec<RouteDefinition>, RouteError> {
    let mut ask_targets = vec!["agent:message?illoc_force=achieve".to_owned()];
    if has_peers {
        ask_targets.push(format!("broker:topic:{ASK_TOPIC}"));
    }
    let ask_targets: Vec<&str> = ask_targets.iter().map(String::as_str).collect();
    let timeout = Duration::from_millis(cfg.aggregation_timeout_ms);
    Ok(vec![
        RouteBuilder::from(&format!(
            "mail:{}?delete=true&copyTo=processed&delay={}",
            cfg.mail_account, cfg.poll_interval_ms
        ))
        .route_id(ids::MAIL_POLL)
        .set_header("id", simple(r#""${id}""#))
        .to_all(&["buffered:forward-message", "direct:ask-agents"])
        .build()?,
        RouteBuilder::from("direct:ask-agents")
            .route_id(ids::ASK_AGENTS)
            .process("escape-quotes", |mut x, _| {
                for h in ["from", "subject"] {
                    if let Some(v) = x.in_msg.header_text(h) {
                        x.set_header(h, escape(&v));
                    }
                }
                let b = escape(&x.body().to_text());
                x.set_body(b);
                Ok(x)
            })
            .set_body(simple(CHECK_RELEVANCE))
            .set_header("receiver", constant("all"))
            .set_header("sender", constant(ROUTER))
            .to_all(&ask_targets)
            .build()?,
        RouteBuilder::from(&reply_consumer_uri())
            .route_id(ids::AGENT_REPLIES)
            .to("buffered:collect-replies")
            .build()?,
        RouteBuilder::from(&format!("broker:queue:{REPLY_QUEUE}"))
            .route_id(ids::REMOTE_REPLIES)
            .to("buffered:collect-replies")
            .build()?,
        RouteBuilder::from("buffered:collect-replies")
            .route_id(ids::COLLECT_REPLIES)
            .set_header("id", simple(r#"${body.split(":")[0]}"#))
            .set_body(simple(r#"${body.split(":")[1]}"#))
            .aggregate(
                header("id"),
                AggregationStrategy::SetUnion,
                Completion::Timeout(timeout),
            )
            .set_header("to", simple("${bodyAs(String)}"))
            .to("buffered:forward-message")
            .build()?,
        RouteBuilder::from("buffered:forward-message")
            .route_id(ids::FORWARD)
            .aggregate(
                header("id"),
                AggregationStrategy::CombineBodyAndHeader("to".into()),
                Completion::Size(2),
            )
            .filter_not(header("to"), "[]")
            .set_header("from", constant(cfg.forward_from.as_str()))
            .to(&format!("mailto:{}", cfg.mail_account))
            .build()?,
    ])
}

/// Replies to the router, rewritten to `id:users`.
pub fn reply_consumer_uri() -> String {
    format!(
        r"agent:message?illoc_force=tell&receiver={ROUTER}&match=relevant\((.*?),(.*)\)&replace=$1:$2"
    )
}

/// In containers that do not poll: take requests from the topic and send
/// rewritten replies back over a queue.
pub fn peer_routes() -> Result<Vec<RouteDefinition>, RouteError> {
    Ok(vec![
        RouteBuilder::from(&format!("broker:topic:{ASK_TOPIC}"))
            .route_id(ids::REMOTE_ASK)
            .to("agent:message?illoc_force=achieve")
            .build()?,
        RouteBuilder::from(&reply_consumer_uri())
            .route_id(ids::RELAY_REPLIES)
            .to(&format!("broker:queue:{REPLY_QUEUE}"))
            .build()?,
    ])
}

/// On any account or plan change: suspend polling, and resume it from a
/// timer after the configured delay.
pub fn lifecycle_routes(cfg: &ScenarioConfig) -> Result<Vec<RouteDefinition>, RouteError> {
    let suspend = format!("control:{}?action=suspend", ids::MAIL_POLL);
    let arm = format!("control:{}?action=restart", ids::RESUME_TIMER);
    let targets = [suspend.as_str(), arm.as_str()];
    Ok(vec![
        RouteBuilder::from(&format!("broker:topic:{ACCOUNT_TOPIC}"))
            .route_id(ids::SUSPEND_ON_ACCOUNT)
            .to_all(&targets)
            .build()?,
        RouteBuilder::from(&format!("broker:topic:{PLAN_TOPIC}"))
            .route_id(ids::SUSPEND_ON_PLAN)
            .to_all(&targets)
            .build()?,
        RouteBuilder::from(&format!("timer:resume-mail?delay={}", cfg.resume_delay_ms))
            .route_id(ids::RESUME_TIMER)
            .auto_startup(false)
            .to(&format!("control:{}?action=resume", ids::MAIL_POLL))
            .to(&format!("control:{}?action=stop", ids::RESUME_TIMER))
            .build()?,
    ])
}

/// Messages for agents in other containers go to the queue named after
/// the receiver's container; this container's queue feeds local agents.
pub fn bridge_routes(container_id: &str) -> Result<Vec<RouteDefinition>, RouteError> {
    Ok(vec![
        RouteBuilder::from("agent:message")
            .route_id(ids::BRIDGE_OUT)
            .filter_not(header("receiver"), ROUTER)
            .filter_not(header("receiver"), "all")
            .set_header(
                DESTINATION_HEADER,
                simple(r#"${headers.receiver.split("__")[0]}"#),
            )
            .to("broker:queue:dummy")
            .build()?,
        RouteBuilder::from(&format!("broker:queue:{container_id}"))
            .route_id(ids::BRIDGE_IN)
            .to("agent:message")
            .build()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_scenario;
    use eip_agents::message::RowSet;
    use eip_agents::term::parse_term;

    #[test]
    fn plans_render_as_terms() {
        let mut rs = RowSet::new(vec!["email".into(), "keywords".into()]);
        rs.push(vec!["a@x".into(), "budget, travel".into()]);
        rs.push(vec!["b@x".into(), "".into()]);
        let text = rows_to_plans(&BodyValue::RowSet(rs)).unwrap();
        assert_eq!(text, r#"[plan("a@x",["budget","travel"]),plan("b@x",[])]"#);
        assert!(parse_term(&text).is_ok());
    }

    #[test]
    fn route_sets_by_role() {
        let cfg = default_scenario();
        let mail = ContainerRole {
            id: "c1".into(),
            polls_mail: true,
            has_peers: true,
        };
        let ids: Vec<String> = build_route_sets(&cfg, &mail)
            .unwrap()
            .into_iter()
            .map(|r| r.route_id)
            .collect();
        assert!(ids.contains(&ids::MAIL_POLL.to_owned()));
        assert!(!ids.contains(&ids::REMOTE_ASK.to_owned()));
        let peer = ContainerRole {
            polls_mail: false,
            ..mail
        };
        let ids: Vec<String> = build_route_sets(&cfg, &peer)
            .unwrap()
            .into_iter()
            .map(|r| r.route_id)
            .collect();
        assert!(ids.contains(&ids::RELAY_REPLIES.to_owned()));
        assert!(!ids.contains(&ids::FORWARD.to_owned()));
    }

    #[test]
    fn escaping_keeps_the_template_parseable() {
        assert_eq!(escape(r#"say "hi" \ bye"#), r#"say \"hi\" \\ bye"#);
    }
}

use std::sync::Arc;
use std::time::Duration;

use eip_agents::agent::{
    ActionMode, ActionResult, AgentEffect, AgentError, BehaviorRule, Container, ContainerConfig,
    Delivery, Payload, Trigger,
};
use eip_agents::route::events::{DEAD_LETTER, DELIVER};
use eip_agents::route::{body, constant, header, EventLog};
use eip_agents::services::Services;
use eip_agents::term::{parse_literal, parse_term};
use eip_agents::{ActionTerm, BodyValue, Exchange, RouteBuilder, Term};

fn lit(s: &str) -> Term {
    parse_literal(s).unwrap()
}

fn term(s: &str) -> Term {
    parse_term(s).unwrap()
}

fn services_with_users(emails: &[&str]) -> Services {
    let s = Services::new("dataSource");
    s.tables.create_table("users", &["email"]).unwrap();
    for e in emails {
        s.tables.insert("users", &[("email", e)]).unwrap();
    }
    s
}

fn stepped(id: &str, services: Option<&Services>) -> Container {
    Container::new(
        ContainerConfig::fixed(id).threaded(false),
        services,
        EventLog::new(),
    )
    .unwrap()
}

fn account_query_route() -> RouteBuilder {
    RouteBuilder::from(
        "agent:action?exchangePattern=InOut&actionName=get_email_accounts&resultHeaderMap=result:1",
    )
    .route_id("account-query")
    .set_body(constant("select email from users"))
    .to("table:dataSource")
    .transform_rows_to_quoted_list("email")
    .set_header("result", body())
}

#[test]
fn sync_action_through_a_table_query_binds_the_account_list() {
    let s = services_with_users(&["a@x", "b@x"]);
    let c = stepped("c1", Some(&s));
    c.context()
        .add_route(account_query_route().build().unwrap())
        .unwrap();
    let rules = vec![
        BehaviorRule::new("fetch", Trigger::OnStartup, |_, _| {
            Ok(vec![AgentEffect::act(
                lit("get_email_accounts(Accounts)"),
                ActionMode::sync(),
            )])
        }),
        BehaviorRule::new(
            "record",
            Trigger::OnActionResult {
                functor: "get_email_accounts".into(),
            },
            |_, p| match p {
                Payload::ActionResult(t) => {
                    Ok(vec![AgentEffect::believe("accounts", t.args()[0].clone())])
                }
                _ => Ok(vec![]),
            },
        ),
    ];
    let id = c.add_agent("a", rules).unwrap();
    c.run_until_idle(10).unwrap();
    let accounts = c
        .with_agent(&id.full_name(), |st| st.belief("accounts").cloned())
        .unwrap();
    assert_eq!(accounts, Some(term(r#"["a@x","b@x"]"#)));
    c.shutdown();
}

#[test]
fn dynamic_container_ids_come_from_sequence_nodes() {
    let s = Services::new("ds");
    let c0 = Container::new(
        ContainerConfig::dynamic().threaded(false),
        Some(&s),
        EventLog::new(),
    )
    .unwrap();
    let c1 = Container::new(
        ContainerConfig::dynamic().threaded(false),
        Some(&s),
        EventLog::new(),
    )
    .unwrap();
    assert_eq!(c0.id(), "container0000000000");
    assert_eq!(c1.id(), "container0000000001");
    assert_eq!(
        c0.add_agent("alice", vec![]).unwrap().full_name(),
        "container0000000000__alice"
    );
    assert_eq!(s.coord.children("/containers").unwrap().len(), 2);
    c0.shutdown();
    assert_eq!(
        s.coord.children("/containers").unwrap(),
        ["container0000000001"]
    );
    let c2 = Container::new(
        ContainerConfig::dynamic().threaded(false),
        Some(&s),
        EventLog::new(),
    )
    .unwrap();
    assert_eq!(c2.id(), "container0000000002", "suffixes are never reused");
    c1.shutdown();
    c2.shutdown();
}

#[test]
fn dynamic_ids_need_the_coordination_service() {
    let err = Container::new(ContainerConfig::dynamic(), None, EventLog::new()).unwrap_err();
    assert!(matches!(err, AgentError::Config(_)));
}

fn message(to: &str, content: &str) -> eip_agents::agent::AgentMessage {
    eip_agents::agent::AgentMessage {
        illoc_force: "tell".into(),
        sender: "outside".into(),
        receiver: to.into(),
        content: lit(content),
        msg_id: "m-1".into(),
        annotations: vec![],
    }
}

#[test]
fn direct_delivery_bypasses_routes() {
    let c = Container::new(
        ContainerConfig::fixed("c1")
            .threaded(false)
            .direct_delivery(true),
        None,
        EventLog::new(),
    )
    .unwrap();
    c.add_agent("a", vec![]).unwrap();
    c.add_agent("b", vec![]).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("agent:message")
                .to("mock:routed")
                .build()
                .unwrap(),
        )
        .unwrap();
    assert_eq!(
        c.route_local_message(message("c1__a", "hi")),
        Delivery::Delivered(1)
    );
    assert_eq!(
        c.route_local_message(message("all", "hi")),
        Delivery::Delivered(2)
    );
    assert!(c.context().mock("routed").is_empty());
    assert_eq!(c.with_agent("c1__a", |st| st.inbox().len()).unwrap(), 2);
    c.shutdown();
}

#[test]
fn without_direct_delivery_local_messages_go_to_routes() {
    let c = stepped("c1", None);
    c.add_agent("a", vec![]).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("agent:message")
                .to("mock:routed")
                .build()
                .unwrap(),
        )
        .unwrap();
    assert_eq!(
        c.route_local_message(message("c1__a", "hi")),
        Delivery::ToRoutes(1)
    );
    let mock = c.context().mock("routed");
    assert!(mock.wait_for(1, Duration::from_secs(2)));
    let x = &mock.received()[0];
    assert_eq!(x.body().to_text(), "hi");
    assert_eq!(x.in_msg.header_text("receiver").as_deref(), Some("c1__a"));
    assert_eq!(c.with_agent("c1__a", |st| st.inbox().len()).unwrap(), 0);
    c.shutdown();
}

#[test]
fn unroutable_messages_are_dead_letters() {
    let c = stepped("c1", None);
    assert_eq!(
        c.route_local_message(message("c9__z", "hi")),
        Delivery::ToRoutes(0)
    );
    assert_eq!(c.events().of_kind(DEAD_LETTER).len(), 1);
}

#[test]
fn percept_producer_replaces_by_functor_and_arity() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap().full_name();
    let b = c.add_agent("b", vec![]).unwrap().full_name();
    c.context()
        .add_route(
            RouteBuilder::from("direct:members")
                .to("agent:percept?persistent=true&updateMode=-+")
                .build()
                .unwrap(),
        )
        .unwrap();
    c.context()
        .send_body("direct:members", r#"agents(["c1__a"])"#)
        .unwrap();
    c.context()
        .send_body("direct:members", r#"agents(["c1__a","c1__b"])"#)
        .unwrap();
    for name in [&a, &b] {
        let ps = c
            .with_agent(name, |st| st.persistent_percepts().to_vec())
            .unwrap();
        assert_eq!(ps, [lit(r#"agents(["c1__a","c1__b"])"#)]);
    }
}

#[test]
fn percept_headers_override_parameters() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap().full_name();
    c.context()
        .add_route(
            RouteBuilder::from("direct:p")
                .to("agent:percept?persistent=true")
                .build()
                .unwrap(),
        )
        .unwrap();
    let x = Exchange::in_only("load(1)")
        .with_header("persistent", "false")
        .with_header("receiver", a.as_str());
    c.context().send("direct:p", x).unwrap();
    let x = Exchange::in_only("stock(2)")
        .with_header("updateMode", "-+")
        .with_header("annotations", "source(db)");
    c.context().send("direct:p", x).unwrap();
    c.with_agent(&a, |st| {
        assert_eq!(st.transient_percepts(), [lit("load(1)")]);
        assert_eq!(st.persistent_percepts(), [lit("stock(2)[source(db)]")]);
    })
    .unwrap();
}

#[test]
fn message_producer_uses_headers_over_parameters() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap().full_name();
    let b = c.add_agent("b", vec![]).unwrap().full_name();
    let route = RouteBuilder::from("direct:ask")
        .set_header("receiver", constant(format!("{a},{b}")))
        .set_header("sender", constant("router"))
        .to("agent:message?illoc_force=achieve&receiver=all")
        .build()
        .unwrap();
    c.context().add_route(route).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("direct:plain")
                .to("agent:message?illoc_force=achieve")
                .build()
                .unwrap(),
        )
        .unwrap();
    c.context().send_body("direct:ask", "check(1)").unwrap();
    let x = Exchange::in_only("check(2)")
        .with_header("illoc_force", "tell")
        .with_header("receiver", a.as_str());
    c.context().send("direct:plain", x).unwrap();
    let inbox_a = c.with_agent(&a, |st| st.inbox().to_vec()).unwrap();
    let inbox_b = c.with_agent(&b, |st| st.inbox().to_vec()).unwrap();
    assert_eq!(inbox_b.len(), 1);
    assert_eq!(inbox_a.len(), 2);
    assert_eq!(inbox_a[0].illoc_force, "achieve");
    assert_eq!(inbox_a[0].sender, "router");
    assert_eq!(inbox_a[1].illoc_force, "tell");
    assert_ne!(inbox_a[0].msg_id, inbox_b[0].msg_id);
    assert_eq!(c.events().of_kind(DELIVER).len(), 3);
}

#[test]
fn message_producer_rejects_non_literals_and_missing_force() {
    let c = stepped("c1", None);
    c.add_agent("a", vec![]).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("direct:m")
                .to("agent:message")
                .build()
                .unwrap(),
        )
        .unwrap();
    assert!(
        c.context().send_body("direct:m", "hello").is_err(),
        "no illoc_force"
    );
    let x = Exchange::in_only("42:[x]").with_header("illoc_force", "tell");
    assert!(c.context().send("direct:m", x).is_err(), "not a literal");
}

#[test]
fn async_actions_need_ground_terms_and_an_endpoint() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap();
    let free = ActionTerm::parse("register(X)").unwrap();
    assert!(matches!(
        c.perform_action(&a, &free, ActionMode::Async),
        Err(AgentError::FreeVariables(_))
    ));
    let ground = ActionTerm::parse("register").unwrap();
    assert!(matches!(
        c.perform_action(&a, &ground, ActionMode::Async),
        Err(AgentError::NoMatchingEndpoint(_))
    ));
    c.context()
        .add_route(
            RouteBuilder::from("agent:action?actionName=register")
                .to("mock:reg")
                .build()
                .unwrap(),
        )
        .unwrap();
    assert_eq!(
        c.perform_action(&a, &ground, ActionMode::Async).unwrap(),
        ActionResult::True
    );
    let mock = c.context().mock("reg");
    assert!(mock.wait_for(1, Duration::from_secs(2)));
    let x = &mock.received()[0];
    assert_eq!(x.in_msg.header_text("actor").as_deref(), Some("c1__a"));
    assert_eq!(
        x.in_msg.header_text("actionName").as_deref(),
        Some("register")
    );
    assert_eq!(x.body().to_text(), "register");
    c.shutdown();
}

#[test]
fn sync_action_times_out_and_the_agent_keeps_cycling() {
    let c = Container::new(
        ContainerConfig::fixed("c1")
            .threaded(false)
            .sync_timeout(Duration::from_millis(50)),
        None,
        EventLog::new(),
    )
    .unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("agent:action?actionName=slow&resultHeaderMap=r:1")
                .process("stall", |x, _| {
                    std::thread::sleep(Duration::from_millis(300));
                    Ok(x)
                })
                .build()
                .unwrap(),
        )
        .unwrap();
    let seen = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let counter = Arc::clone(&seen);
    let rules = vec![
        BehaviorRule::new("slow", Trigger::OnStartup, |_, _| {
            Ok(vec![AgentEffect::act(
                lit("slow(R)"),
                ActionMode::Sync(Duration::ZERO),
            )])
        }),
        BehaviorRule::new(
            "ping",
            Trigger::OnMessage {
                illoc_force: "tell".into(),
                functor: None,
            },
            move |_, _| {
                counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(vec![])
            },
        ),
    ];
    let a = c.add_agent("a", rules).unwrap();
    let started = std::time::Instant::now();
    c.step(&a.full_name()).unwrap();
    assert!(started.elapsed() < Duration::from_millis(250));
    assert!(c
        .events()
        .of_kind("error")
        .iter()
        .any(|e| e.detail.contains("timed out")));
    c.deliver_local(message(&a.full_name(), "hi")).unwrap();
    c.step(&a.full_name()).unwrap();
    assert_eq!(seen.load(std::sync::atomic::Ordering::SeqCst), 1);
    c.shutdown();
}

#[test]
fn sync_action_without_result_map_is_a_configuration_error() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("agent:action?actionName=q")
                .to("mock:q")
                .build()
                .unwrap(),
        )
        .unwrap();
    let t = ActionTerm::parse("q(X)").unwrap();
    assert!(matches!(
        c.perform_action(&a, &t, ActionMode::sync()),
        Err(AgentError::Config(_))
    ));
}

#[test]
fn sync_action_binds_two_result_headers() {
    let c = stepped("c1", None);
    let a = c.add_agent("a", vec![]).unwrap();
    c.context()
        .add_route(
            RouteBuilder::from("agent:action?actionName=pair&resultHeaderMap=h1:1,h2:2")
                .set_header("h1", constant("left"))
                .set_header("h2", header("actionName"))
                .build()
                .unwrap(),
        )
        .unwrap();
    let t = ActionTerm::parse("pair(A, B)").unwrap();
    match c.perform_action(&a, &t, ActionMode::sync()).unwrap() {
        ActionResult::Bound(b) => assert_eq!(b.literal(), &lit("pair(left, pair)")),
        other => panic!("unexpected {other:?}"),
    }
    c.shutdown();
}

#[test]
fn threaded_agents_react_to_messages() {
    let c = Container::new(
        ContainerConfig::fixed("c1").direct_delivery(true),
        None,
        EventLog::new(),
    )
    .unwrap();
    let echo = BehaviorRule::new(
        "echo",
        Trigger::OnMessage {
            illoc_force: "tell".into(),
            functor: Some("ping".into()),
        },
        |_, p| match p {
            Payload::Message(m) => Ok(vec![AgentEffect::tell(
                m.sender.clone(),
                Term::atom("pong"),
            )]),
            _ => Ok(vec![]),
        },
    );
    c.add_agent("echo", vec![echo]).unwrap();
    c.add_agent("other", vec![]).unwrap();
    c.start();
    let mut ping = message("c1__echo", "ping");
    ping.sender = "c1__other".into();
    c.route_local_message(ping);
    let delivered = c.events().wait_until(Duration::from_secs(2), |evs| {
        evs.iter()
            .any(|e| e.event == DELIVER && e.route_id == "c1__other" && e.detail.contains("pong"))
    });
    assert!(delivered);
    c.shutdown();
    assert!(!c.is_running());
}

#[test]
fn header_values_bind_as_terms_or_strings() {
    use eip_agents::agent::endpoint::header_to_term;
    assert_eq!(
        header_to_term(&BodyValue::text(r#"["a@x"]"#)),
        term(r#"["a@x"]"#)
    );
    assert_eq!(
        header_to_term(&BodyValue::text("not a term!")),
        Term::string("not a term!")
    );
    assert_eq!(header_to_term(&BodyValue::Number(3.0)), Term::Number(3.0));
}

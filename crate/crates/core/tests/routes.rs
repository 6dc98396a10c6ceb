use std::collections::BTreeSet;
use std::time::Duration;

use eip_agents::route::events::{FILTERED, RECEIVE, RESUMED, SUSPENDED};
use eip_agents::route::{
    body, constant, header, simple, AggregationStrategy, Completion, EventLog, IdempotentRepository,
};
use eip_agents::{
    BodyValue, Exchange, ExchangePattern, RouteBuilder, RouteContext, RouteError, RouteState,
};
use proptest::prelude::*;

fn ctx() -> RouteContext {
    RouteContext::new("test", EventLog::new())
}

fn texts(items: &[&str]) -> BodyValue {
    BodyValue::ListOf(items.iter().map(|s| BodyValue::text(*s)).collect())
}

#[test]
fn in_out_reply_carries_the_last_header() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:q")
            .set_header("h", constant("v"))
            .build()
            .unwrap(),
    )
    .unwrap();
    let mut x = Exchange::in_only("ping");
    x.set_pattern(ExchangePattern::InOut);
    let reply = c.send("direct:q", x).unwrap();
    assert_eq!(reply.in_msg.header_text("h").as_deref(), Some("v"));
    c.shutdown();
}

#[test]
fn filter_and_filter_not_log_what_they_drop() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:f")
            .route_id("f")
            .filter(header("kind"), "keep")
            .filter_not(body(), "[]")
            .to("mock:out")
            .build()
            .unwrap(),
    )
    .unwrap();
    for (kind, b) in [("keep", "a"), ("drop", "b"), ("keep", "[]"), ("keep", "c")] {
        c.send("direct:f", Exchange::in_only(b).with_header("kind", kind))
            .unwrap();
    }
    let got: Vec<String> = c
        .mock("out")
        .bodies()
        .iter()
        .map(BodyValue::to_text)
        .collect();
    assert_eq!(got, ["a", "c"]);
    assert_eq!(c.events().of_kind(FILTERED).len(), 2);
    c.shutdown();
}

#[test]
fn multicast_sends_independent_copies() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:m")
            .to_all(&["mock:a", "direct:change"])
            .to("mock:after")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.add_route(
        RouteBuilder::from("direct:change")
            .set_body(constant("changed"))
            .to("mock:b")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.send_body("direct:m", "orig").unwrap();
    assert_eq!(c.mock("a").bodies(), [BodyValue::text("orig")]);
    assert_eq!(c.mock("b").bodies(), [BodyValue::text("changed")]);
    assert_eq!(c.mock("after").bodies(), [BodyValue::text("orig")]);
    c.shutdown();
}

#[test]
fn buffered_messages_wait_while_the_consumer_is_suspended() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("buffered:q")
            .route_id("q")
            .to("mock:q")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.suspend_route("q").unwrap();
    assert_eq!(c.route_state("q").unwrap(), RouteState::Suspended);
    c.send_body("buffered:q", "held").unwrap();
    std::thread::sleep(Duration::from_millis(150));
    assert!(c.mock("q").is_empty());
    c.resume_route("q").unwrap();
    assert!(c.mock("q").wait_for(1, Duration::from_secs(2)));
    c.shutdown();
}

#[test]
fn suspended_route_is_silent_in_the_log() {
    let events = EventLog::new();
    let c = RouteContext::new("t", events.clone());
    c.add_route(
        RouteBuilder::from("buffered:s")
            .route_id("s")
            .to("mock:s")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.suspend_route("s").unwrap();
    for i in 0..5 {
        c.send_body("buffered:s", format!("m{i}")).unwrap();
    }
    std::thread::sleep(Duration::from_millis(120));
    c.resume_route("s").unwrap();
    assert!(c.mock("s").wait_for(5, Duration::from_secs(2)));
    let log = events.events();
    let pos = |kind: &str| {
        log.iter()
            .position(|e| e.route_id == "s" && e.event == kind)
            .unwrap()
    };
    let (s, r) = (pos(SUSPENDED), pos(RESUMED));
    assert!(!log[s..r]
        .iter()
        .any(|e| e.route_id == "s" && e.event == RECEIVE));
    c.shutdown();
}

#[test]
fn lifecycle_rejects_invalid_transitions() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:l")
            .route_id("l")
            .auto_startup(false)
            .to("mock:l")
            .build()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(c.route_state("l").unwrap(), RouteState::Stopped);
    assert!(matches!(
        c.suspend_route("l"),
        Err(RouteError::InvalidTransition { .. })
    ));
    assert!(matches!(
        c.send_body("direct:l", "x"),
        Err(RouteError::NoConsumer(_))
    ));
    c.start_route("l").unwrap();
    c.send_body("direct:l", "x").unwrap();
    assert!(matches!(
        c.resume_route("l"),
        Err(RouteError::InvalidTransition { .. })
    ));
    c.stop_route("l").unwrap();
    c.restart_route("l").unwrap();
    assert_eq!(c.route_state("l").unwrap(), RouteState::Started);
    assert!(matches!(
        c.start_route("nope"),
        Err(RouteError::UnknownRoute(_))
    ));
    c.shutdown();
}

#[test]
fn control_endpoint_drives_other_routes() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("buffered:w")
            .route_id("worker")
            .to("mock:w")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.add_route(
        RouteBuilder::from("direct:ctl")
            .to("control:worker?action=suspend")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.send_body("direct:ctl", "").unwrap();
    assert_eq!(c.route_state("worker").unwrap(), RouteState::Suspended);
    c.send_body("control:worker?action=resume", "").unwrap();
    assert_eq!(c.route_state("worker").unwrap(), RouteState::Started);
    c.send_body("control:worker?action=stop", "").unwrap();
    assert_eq!(c.route_state("worker").unwrap(), RouteState::Stopped);
    assert!(c.send_body("control:worker?action=explode", "").is_err());
    c.shutdown();
}

#[test]
fn duplicate_route_ids_are_rejected() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:a")
            .route_id("r")
            .build()
            .unwrap(),
    )
    .unwrap();
    let err = c
        .add_route(
            RouteBuilder::from("direct:b")
                .route_id("r")
                .build()
                .unwrap(),
        )
        .unwrap_err();
    assert!(matches!(err, RouteError::DuplicateRoute(_)));
    c.shutdown();
}

#[test]
fn aggregation_timeout_flushes_partial_buckets() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:t")
            .route_id("t")
            .aggregate(
                header("k"),
                AggregationStrategy::SetUnion,
                Completion::Timeout(Duration::from_millis(150)),
            )
            .to("mock:t")
            .build()
            .unwrap(),
    )
    .unwrap();
    c.send(
        "direct:t",
        Exchange::in_only(r#"["b@x"]"#).with_header("k", "1"),
    )
    .unwrap();
    c.send(
        "direct:t",
        Exchange::in_only(r#"["a@x","b@x"]"#).with_header("k", "1"),
    )
    .unwrap();
    assert_eq!(c.pending_aggregates("t"), 1);
    assert!(c.mock("t").is_empty());
    assert!(c.mock("t").wait_for(1, Duration::from_secs(2)));
    assert_eq!(c.mock("t").bodies()[0].to_text(), r#"["a@x","b@x"]"#);
    assert_eq!(c.pending_aggregates("t"), 0);
    c.shutdown();
}

#[test]
fn rows_become_a_quoted_list() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:rows")
            .transform_rows_to_quoted_list("email")
            .to("mock:rows")
            .build()
            .unwrap(),
    )
    .unwrap();
    let mut rs = eip_agents::RowSet::new(vec!["email".into()]);
    rs.push(vec!["a@x".into()]);
    rs.push(vec!["say \"hi\"".into()]);
    c.send_body("direct:rows", BodyValue::RowSet(rs)).unwrap();
    assert_eq!(
        c.mock("rows").bodies()[0].to_text(),
        r#"["a@x","say \"hi\""]"#
    );
    c.shutdown();
}

#[test]
fn custom_processor_errors_are_logged() {
    let c = ctx();
    c.add_route(
        RouteBuilder::from("direct:p")
            .route_id("p")
            .process("boom", |_, _| Err(RouteError::TypeMismatch("no".into())))
            .to("mock:p")
            .build()
            .unwrap(),
    )
    .unwrap();
    assert!(c.send_body("direct:p", "x").is_err());
    assert!(c.mock("p").is_empty());
    assert_eq!(
        c.events().of_kind(eip_agents::route::events::ERROR).len(),
        1
    );
    c.shutdown();
}

fn echo_pipeline(c: &RouteContext) {
    c.add_route(
        RouteBuilder::from("direct:d")
            .set_header("n", simple("${body.size}"))
            .set_body(simple("${bodyAs(String)}|${header.n}"))
            .to("mock:d")
            .build()
            .unwrap(),
    )
    .unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipelines_are_deterministic(inputs in prop::collection::vec(prop::collection::vec("[a-z]{0,4}", 0..5), 1..10)) {
        let run = || {
            let c = ctx();
            echo_pipeline(&c);
            for items in &inputs {
                let refs: Vec<&str> = items.iter().map(String::as_str).collect();
                c.send_body("direct:d", texts(&refs)).unwrap();
            }
            let out = c.mock("d").bodies();
            c.shutdown();
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn split_then_aggregate_restores_the_list(items in prop::collection::vec("[ -~]{0,8}", 1..16)) {
        let c = ctx();
        c.add_route(
            RouteBuilder::from("direct:sa")
                .set_header("n", simple("${body.size}"))
                .split(simple("${body}"))
                .aggregate(constant("all"), AggregationStrategy::ListAppend, Completion::SizeExpr(header("n")))
                .to("mock:sa")
                .build()
                .unwrap(),
        )
        .unwrap();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        c.send_body("direct:sa", texts(&refs)).unwrap();
        prop_assert_eq!(c.mock("sa").bodies(), vec![texts(&refs)]);
        c.shutdown();
    }

    #[test]
    fn set_union_ignores_reply_order(
        replies in prop::collection::vec(prop::collection::vec("[a-d]@x", 0..4), 1..6),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let union = |order: &[usize]| {
            let c = ctx();
            c.add_route(
                RouteBuilder::from("direct:u")
                    .aggregate(constant("k"), AggregationStrategy::SetUnion, Completion::Size(replies.len()))
                    .to("mock:u")
                    .build()
                    .unwrap(),
            )
            .unwrap();
            for &i in order {
                let refs: Vec<&str> = replies[i].iter().map(String::as_str).collect();
                c.send_body("direct:u", texts(&refs)).unwrap();
            }
            let out = c.mock("u").bodies();
            c.shutdown();
            out
        };
        let mut order: Vec<usize> = (0..replies.len()).collect();
        let first = union(&order);
        order.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
        prop_assert_eq!(&first, &union(&order));
        let want: BTreeSet<&String> = replies.iter().flatten().collect();
        let BodyValue::ListOf(got) = &first[0] else { panic!("union is a list") };
        prop_assert_eq!(got.len(), want.len());
    }

    #[test]
    fn idempotent_consumer_drops_exactly_the_duplicates(keys in prop::collection::vec(0u8..20, 0..60)) {
        let c = ctx();
        c.add_route(
            RouteBuilder::from("direct:i")
                .idempotent_consumer(header("key"), IdempotentRepository::shared(100))
                .to("mock:i")
                .build()
                .unwrap(),
        )
        .unwrap();
        for k in &keys {
            c.send("direct:i", Exchange::in_only("").with_header("key", k.to_string())).unwrap();
        }
        let distinct: BTreeSet<&u8> = keys.iter().collect();
        prop_assert_eq!(c.mock("i").len(), distinct.len());
        c.shutdown();
    }
}

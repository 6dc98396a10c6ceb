use std::collections::BTreeSet;
use std::time::Duration;

use eip_agents::services::{Coordinator, CreateMode, MailStore, TableStore};
use proptest::prelude::*;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

#[derive(Debug, Clone)]
enum CoordOp {
    Register(usize),
    Expire(usize),
    Reopen(usize),
}

fn coord_op() -> impl Strategy<Value = CoordOp> {
    prop_oneof![
        4 => (0usize..4).prop_map(CoordOp::Register),
        1 => (0usize..4).prop_map(CoordOp::Expire),
        1 => (0usize..4).prop_map(CoordOp::Reopen),
    ]
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn sequential_names_increase_and_are_never_reused(ops in prop::collection::vec(coord_op(), 1..60)) {
        let coord = Coordinator::new();
        let mut sessions: Vec<_> = (0..4).map(|_| Some(coord.open_session().unwrap())).collect();
        let mut issued: Vec<String> = Vec::new();
        for op in ops {
            match op {
                CoordOp::Register(i) => {
                    if let Some(s) = sessions[i] {
                        let p = coord.create(s, "/grp/m", "", CreateMode::EphemeralSequential, true).unwrap();
                        if let Some(prev) = issued.last() {
                            prop_assert!(p > *prev, "{p} not after {prev}");
                        }
                        prop_assert!(!issued.contains(&p));
                        issued.push(p);
                    }
                }
                CoordOp::Expire(i) => {
                    if let Some(s) = sessions[i].take() {
                        coord.expire_session(s).unwrap();
                    }
                }
                CoordOp::Reopen(i) => {
                    if sessions[i].is_none() {
                        sessions[i] = Some(coord.open_session().unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn child_watch_ends_on_the_current_membership(ops in prop::collection::vec(coord_op(), 1..40)) {
        let coord = Coordinator::new();
        let admin = coord.open_session().unwrap();
        coord.create(admin, "/grp", "", CreateMode::Persistent, false).unwrap();
        let watcher = coord.watch_children("/grp", true).unwrap();
        let mut sessions: Vec<_> = (0..4).map(|_| Some(coord.open_session().unwrap())).collect();
        for op in ops {
            match op {
                CoordOp::Register(i) => {
                    if let Some(s) = sessions[i] {
                        coord.create(s, "/grp/m", "", CreateMode::EphemeralSequential, false).unwrap();
                    }
                }
                CoordOp::Expire(i) => {
                    if let Some(s) = sessions[i].take() {
                        coord.expire_session(s).unwrap();
                    }
                }
                CoordOp::Reopen(i) => {
                    if sessions[i].is_none() {
                        sessions[i] = Some(coord.open_session().unwrap());
                    }
                }
            }
        }
        let mut last = None;
        while let Ok(list) = watcher.receiver().recv_timeout(Duration::from_millis(5)) {
            last = Some(list);
        }
        prop_assert_eq!(last, Some(coord.children("/grp").unwrap()));
    }

    #[test]
    fn mail_is_conserved_across_send_and_poll(
        sends in prop::collection::vec((prop::collection::btree_set(0usize..5, 1..4), any::<bool>()), 1..30),
    ) {
        let store = MailStore::new();
        let accounts: Vec<String> = (0..5).map(|i| format!("u{i}@x")).collect();
        for a in &accounts {
            store.create_account(a);
        }
        let mut delivered = 0;
        let mut drained = 0;
        for (to, poll_first) in sends {
            let to: Vec<String> = to.into_iter().map(|i| accounts[i].clone()).collect();
            delivered += store.send("s@x", &to, "subj", "body").unwrap();
            if poll_first {
                drained += store.poll(&to[0], true, None).unwrap().len();
            }
        }
        prop_assert_eq!(store.total_inbox_count() + drained, delivered);
        // Without delete, polling only flips the unread flag.
        let before = store.total_inbox_count();
        for a in &accounts {
            store.poll(a, false, Some("seen")).unwrap();
        }
        prop_assert_eq!(store.total_inbox_count(), before);
        for a in &accounts {
            prop_assert!(store.poll(a, false, None).unwrap().is_empty());
        }
    }

    #[test]
    fn queries_never_change_table_contents(
        rows in prop::collection::vec(("[a-z]{1,5}", "[a-z,]{0,8}"), 0..15),
        sql in prop::sample::select(vec![
            "SELECT * FROM plans",
            "select email from plans",
            "SELECT keywords, email FROM plans;",
            "SELECT nope FROM plans",
            "DELETE FROM plans",
            "SELECT * FROM missing",
        ]),
    ) {
        let store = TableStore::new("ds", None);
        store.create_table("plans", &["email", "keywords"]).unwrap();
        for (e, k) in &rows {
            store.insert("plans", &[("email", e), ("keywords", k)]).unwrap();
        }
        let before = store.snapshot("plans").unwrap();
        if let Ok(rs) = store.query(sql) {
            prop_assert_eq!(rs.len(), rows.len());
        }
        prop_assert_eq!(store.snapshot("plans").unwrap(), before);
    }
}

#[test]
fn expiring_a_session_removes_exactly_its_nodes() {
    let coord = Coordinator::new();
    let a = coord.open_session().unwrap();
    let b = coord.open_session().unwrap();
    let pa = coord
        .create(a, "/g/n", "a", CreateMode::EphemeralSequential, true)
        .unwrap();
    let pb = coord
        .create(b, "/g/n", "b", CreateMode::EphemeralSequential, true)
        .unwrap();
    let removed: BTreeSet<String> = coord.expire_session(a).unwrap().into_iter().collect();
    assert!(removed.contains(&pa));
    assert!(!coord.exists(&pa));
    assert!(coord.exists(&pb));
    assert!(coord.exists("/g"));
    assert!(coord
        .create(a, "/g/n", "", CreateMode::Ephemeral, false)
        .is_err());
}

#[test]
fn unavailable_coordinator_rejects_writes() {
    let coord = Coordinator::new();
    let s = coord.open_session().unwrap();
    coord.set_available(false);
    assert!(coord
        .create(s, "/x", "", CreateMode::Persistent, false)
        .is_err());
    coord.set_available(true);
    assert!(coord
        .create(s, "/x", "", CreateMode::Persistent, false)
        .is_ok());
}

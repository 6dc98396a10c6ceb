//! Coordination service: a tree of nodes with ephemeral ownership,
//! sequential naming and child watches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::message::{BodyValue, EndpointUri, Exchange};
use crate::route::{
    spawn_receiver, Component, Consumer, Producer, RouteContext, RouteError, RouteInlet,
};

/// Header set by the producer to the path actually created.
pub const PATH_HEADER: &str = "coord.path";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoordError {
    #[error("coordination service unavailable")]
    Unavailable,
    #[error("node `{0}` already exists")]
    NodeExists(String),
    #[error("no node `{0}`")]
    NoNode(String),
    #[error("parent of `{0}` does not exist")]
    NoParent(String),
    #[error("ephemeral node `{0}` cannot have children")]
    EphemeralParent(String),
    #[error("session {0} has expired")]
    SessionExpired(SessionId),
    #[error("invalid path `{0}`")]
    InvalidPath(String),
    #[error("unknown create mode `{0}`")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CreateMode {
    Persistent,
    Ephemeral,
    EphemeralSequential,
}

impl CreateMode {
    fn is_ephemeral(self) -> bool {
        !matches!(self, CreateMode::Persistent)
    }
}

impl FromStr for CreateMode {
    type Err = CoordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PERSISTENT" => Ok(CreateMode::Persistent),
            "EPHEMERAL" => Ok(CreateMode::Ephemeral),
            "EPHEMERAL_SEQUENTIAL" => Ok(CreateMode::EphemeralSequential),
            other => Err(CoordError::UnknownMode(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    data: String,
    mode: CreateMode,
    owner: Option<SessionId>,
}

struct ChildWatch {
    id: u64,
    path: String,
    tx: Sender<Vec<String>>,
}

struct CoordState {
    available: bool,
    nodes: BTreeMap<String, Node>,
    sequences: HashMap<String, u64>,
    sessions: HashMap<SessionId, BTreeSet<String>>,
    next_session: u64,
    next_watch: u64,
    watches: Vec<ChildWatch>,
}

impl CoordState {
    fn check(&self) -> Result<(), CoordError> {
        if self.available {
            Ok(())
        } else {
            Err(CoordError::Unavailable)
        }
    }

    fn children(&self, path: &str) -> Vec<String> {
        let prefix = if path == "/" {
            "/".to_owned()
        } else {
            format!("{path}/")
        };
        self.nodes
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .filter_map(|(k, _)| {
                let rest = &k[prefix.len()..];
                (!rest.is_empty() && !rest.contains('/')).then(|| rest.to_owned())
            })
            .collect()
    }

    /// Sends the current child list of each changed parent to its watchers.
    fn fire(&mut self, parents: &BTreeSet<String>) {
        for parent in parents {
            let kids = self.children(parent);
            self.watches
                .retain(|w| w.path != *parent || w.tx.send(kids.clone()).is_ok());
        }
    }
}

fn parent_of(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) => "/",
        Some(i) => &path[..i],
        None => "/",
    }
}

fn validate(path: &str) -> Result<(), CoordError> {
    let ok = path.starts_with('/')
        && (path == "/" || (!path.ends_with('/') && !path.contains("//")))
        && !path.chars().any(char::is_whitespace);
    if ok {
        Ok(())
    } else {
        Err(CoordError::InvalidPath(path.to_owned()))
    }
}

#[derive(Clone)]
pub struct Coordinator {
    state: Arc<Mutex<CoordState>>,
}

impl Default for Coordinator {
    fn default() -> Self {
        Self::new()
    }
}

/// Receives child lists for one watched path; unregisters on drop.
pub struct ChildWatcher {
    coord: Coordinator,
    id: u64,
    rx: Receiver<Vec<String>>,
}

impl ChildWatcher {
    pub fn receiver(&self) -> &Receiver<Vec<String>> {
        &self.rx
    }
}

impl Drop for ChildWatcher {
    fn drop(&mut self) {
        self.coord.state.lock().watches.retain(|w| w.id != self.id);
    }
}

impl Coordinator {
    pub fn new() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "/".to_owned(),
            Node {
                data: String::new(),
                mode: CreateMode::Persistent,
                owner: None,
            },
        );
        Coordinator {
            state: Arc::new(Mutex::new(CoordState {
                available: true,
                nodes,
                sequences: HashMap::new(),
                sessions: HashMap::new(),
                next_session: 1,
                next_watch: 1,
                watches: Vec::new(),
            })),
        }
    }

    /// Simulates the service going down or coming back.
    pub fn set_available(&self, up: bool) {
        self.state.lock().available = up;
    }

    pub fn open_session(&self) -> Result<SessionId, CoordError> {
        let mut st = self.state.lock();
        st.check()?;
        let id = SessionId(st.next_session);
        st.next_session += 1;
        st.sessions.insert(id, BTreeSet::new());
        Ok(id)
    }

    pub fn session_alive(&self, session: SessionId) -> bool {
        self.state.lock().sessions.contains_key(&session)
    }

    /// Ends a session, deleting its ephemeral nodes. Each affected parent's
    /// watchers see one update for the whole batch.
    pub fn expire_session(&self, session: SessionId) -> Result<Vec<String>, CoordError> {
        let mut st = self.state.lock();
        let owned = st
            .sessions
            .remove(&session)
            .ok_or(CoordError::SessionExpired(session))?;
        let mut parents = BTreeSet::new();
        for path in &owned {
            if st.nodes.remove(path).is_some() {
                parents.insert(parent_of(path).to_owned());
            }
        }
        st.fire(&parents);
        tracing::debug!("session {session} expired, removed {} nodes", owned.len());
        Ok(owned.into_iter().collect())
    }

    /// Creates a node, returning its actual path. With `create_parents`,
    /// missing ancestors are created as empty persistent nodes.
    pub fn create(
        &self,
        session: SessionId,
        path: &str,
        data: &str,
        mode: CreateMode,
        create_parents: bool,
    ) -> Result<String, CoordError> {
        validate(path)?;
        if path == "/" {
            return Err(CoordError::NodeExists(path.to_owned()));
        }
        let mut st = self.state.lock();
        st.check()?;
        if mode.is_ephemeral() && !st.sessions.contains_key(&session) {
            return Err(CoordError::SessionExpired(session));
        }
        let parent = parent_of(path).to_owned();
        let mut changed = BTreeSet::new();
        if !st.nodes.contains_key(&parent) {
            if !create_parents {
                return Err(CoordError::NoParent(path.to_owned()));
            }
            let mut missing = Vec::new();
            let mut p = parent.as_str();
            while !st.nodes.contains_key(p) {
                missing.push(p.to_owned());
                p = parent_of(p);
            }
            if st.nodes[p].mode.is_ephemeral() {
                return Err(CoordError::EphemeralParent(p.to_owned()));
            }
            for m in missing.into_iter().rev() {
                changed.insert(parent_of(&m).to_owned());
                st.nodes.insert(
                    m,
                    Node {
                        data: String::new(),
                        mode: CreateMode::Persistent,
                        owner: None,
                    },
                );
            }
        } else if st.nodes[&parent].mode.is_ephemeral() {
            return Err(CoordError::EphemeralParent(parent));
        }
        let actual = match mode {
            CreateMode::EphemeralSequential => {
                let counter = st.sequences.entry(parent.clone()).or_insert(0);
                let n = *counter;
                *counter += 1;
                format!("{path}{n:010}")
            }
            _ => path.to_owned(),
        };
        if st.nodes.contains_key(&actual) {
            return Err(CoordError::NodeExists(actual));
        }
        let owner = mode.is_ephemeral().then_some(session);
        st.nodes.insert(
            actual.clone(),
            Node {
                data: data.to_owned(),
                mode,
                owner,
            },
        );
        if let Some(s) = owner {
            st.sessions
                .get_mut(&s)
                .expect("checked above")
                .insert(actual.clone());
        }
        changed.insert(parent);
        st.fire(&changed);
        Ok(actual)
    }

    pub fn delete(&self, path: &str) -> Result<(), CoordError> {
        let mut st = self.state.lock();
        st.check()?;
        if !st.children(path).is_empty() {
            return Err(CoordError::NodeExists(format!("{path} (has children)")));
        }
        let node = st
            .nodes
            .remove(path)
            .ok_or_else(|| CoordError::NoNode(path.to_owned()))?;
        if let Some(owner) = node.owner {
            if let Some(owned) = st.sessions.get_mut(&owner) {
                owned.remove(path);
            }
        }
        st.fire(&BTreeSet::from([parent_of(path).to_owned()]));
        Ok(())
    }

    pub fn exists(&self, path: &str) -> bool {
        self.state.lock().nodes.contains_key(path)
    }

    pub fn get_data(&self, path: &str) -> Result<String, CoordError> {
        let st = self.state.lock();
        st.check()?;
        st.nodes
            .get(path)
            .map(|n| n.data.clone())
            .ok_or_else(|| CoordError::NoNode(path.to_owned()))
    }

    pub fn set_data(&self, path: &str, data: &str) -> Result<(), CoordError> {
        let mut st = self.state.lock();
        st.check()?;
        let node = st
            .nodes
            .get_mut(path)
            .ok_or_else(|| CoordError::NoNode(path.to_owned()))?;
        node.data = data.to_owned();
        Ok(())
    }

    /// Sorted child names.
    pub fn children(&self, path: &str) -> Result<Vec<String>, CoordError> {
        let st = self.state.lock();
        st.check()?;
        if !st.nodes.contains_key(path) {
            return Err(CoordError::NoNode(path.to_owned()));
        }
        Ok(st.children(path))
    }

    /// Delivers the current child list now and, when `repeat`, again after
    /// every membership change.
    pub fn watch_children(&self, path: &str, repeat: bool) -> Result<ChildWatcher, CoordError> {
        let mut st = self.state.lock();
        st.check()?;
        if !st.nodes.contains_key(path) {
            return Err(CoordError::NoNode(path.to_owned()));
        }
        let (tx, rx) = unbounded();
        let _ = tx.send(st.children(path));
        let id = st.next_watch;
        st.next_watch += 1;
        if repeat {
            st.watches.push(ChildWatch {
                id,
                path: path.to_owned(),
                tx,
            });
        }
        drop(st);
        Ok(ChildWatcher {
            coord: self.clone(),
            id,
            rx,
        })
    }
}

/// `coord://SERVER/PATH`, bound to one client session. The server part is
/// informational.
pub struct CoordComponent {
    coord: Coordinator,
    session: SessionId,
}

impl CoordComponent {
    pub fn new(coord: Coordinator, session: SessionId) -> Self {
        CoordComponent { coord, session }
    }
}

fn node_path(uri: &EndpointUri) -> Result<String, RouteError> {
    let rest = uri
        .path
        .strip_prefix("//")
        .ok_or_else(|| RouteError::init(uri, "expected coord://SERVER/PATH"))?;
    let path = match rest.find('/') {
        Some(i) => rest[i..].to_owned(),
        None => "/".to_owned(),
    };
    validate(&path).map_err(|e| RouteError::init(uri, e))?;
    Ok(path)
}

struct CoordProducer {
    coord: Coordinator,
    session: SessionId,
    uri: EndpointUri,
    path: String,
    create: bool,
    mode: CreateMode,
}

impl Producer for CoordProducer {
    fn process(&self, mut x: Exchange) -> Result<Exchange, RouteError> {
        let data = x.body().to_text();
        let actual = if self.create {
            self.coord
                .create(self.session, &self.path, &data, self.mode, true)
                .map_err(|e| RouteError::endpoint(&self.uri, e))?
        } else {
            self.coord
                .set_data(&self.path, &data)
                .map_err(|e| RouteError::endpoint(&self.uri, e))?;
            self.path.clone()
        };
        x.set_header(PATH_HEADER, actual);
        Ok(x)
    }
}

struct CoordConsumer {
    coord: Coordinator,
    session: SessionId,
    uri: EndpointUri,
    path: String,
    repeat: bool,
    create: bool,
    thread: Option<JoinHandle<()>>,
}

impl Consumer for CoordConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        if self.create && !self.coord.exists(&self.path) {
            match self
                .coord
                .create(self.session, &self.path, "", CreateMode::Persistent, true)
            {
                Ok(_) | Err(CoordError::NodeExists(_)) => {}
                Err(e) => return Err(RouteError::init(&self.uri, e)),
            }
        }
        let watcher = self
            .coord
            .watch_children(&self.path, self.repeat)
            .map_err(|e| RouteError::init(&self.uri, e))?;
        let path = self.path.clone();
        let rx = watcher.receiver().clone();
        self.thread = Some(spawn_receiver(inlet, &self.path, rx, move |em, kids| {
            // Keeps the watch registered for as long as the thread runs.
            let _ = &watcher;
            let x =
                Exchange::in_only(BodyValue::texts(kids)).with_header(PATH_HEADER, path.as_str());
            if let Err(e) = em.submit(x) {
                tracing::warn!("coordination watch hand-off failed: {e}");
            }
        }));
        Ok(())
    }

    fn stop(&mut self) {
        self.thread.take();
    }
}

impl Component for CoordComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        let mode = match uri.param("createMode") {
            Some(m) => m.parse().map_err(|e| RouteError::init(uri, e))?,
            None => CreateMode::Persistent,
        };
        Ok(Arc::new(CoordProducer {
            coord: self.coord.clone(),
            session: self.session,
            uri: uri.clone(),
            path: node_path(uri)?,
            create: uri.param_bool("create").unwrap_or(false),
            mode,
        }))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        if uri.param_bool("listChildren") != Some(true) {
            return Err(RouteError::init(
                uri,
                "only listChildren=true consumers are supported",
            ));
        }
        Ok(Box::new(CoordConsumer {
            coord: self.coord.clone(),
            session: self.session,
            uri: uri.clone(),
            path: node_path(uri)?,
            repeat: uri.param_bool("repeat").unwrap_or(false),
            create: uri.param_bool("create").unwrap_or(false),
            thread: None,
        }))
    }

    /// Reads the node's data.
    fn receive_once(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Option<Exchange>, RouteError> {
        let path = node_path(uri)?;
        let data = self
            .coord
            .get_data(&path)
            .map_err(|e| RouteError::endpoint(uri, e))?;
        Ok(Some(Exchange::in_only(data).with_header(PATH_HEADER, path)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_names_are_padded_and_never_reused() {
        let c = Coordinator::new();
        let s = c.open_session().unwrap();
        let a = c
            .create(
                s,
                "/agents/agent",
                "x",
                CreateMode::EphemeralSequential,
                true,
            )
            .unwrap();
        let b = c
            .create(
                s,
                "/agents/agent",
                "y",
                CreateMode::EphemeralSequential,
                true,
            )
            .unwrap();
        assert_eq!(a, "/agents/agent0000000000");
        assert_eq!(b, "/agents/agent0000000001");
        c.delete(&b).unwrap();
        let d = c
            .create(
                s,
                "/agents/agent",
                "z",
                CreateMode::EphemeralSequential,
                true,
            )
            .unwrap();
        assert_eq!(d, "/agents/agent0000000002");
    }

    #[test]
    fn persistent_duplicate_and_missing_parent() {
        let c = Coordinator::new();
        let s = c.open_session().unwrap();
        c.create(s, "/x", "", CreateMode::Persistent, false)
            .unwrap();
        assert_eq!(
            c.create(s, "/x", "", CreateMode::Persistent, false),
            Err(CoordError::NodeExists("/x".into()))
        );
        assert_eq!(
            c.create(s, "/a/b", "", CreateMode::Persistent, false),
            Err(CoordError::NoParent("/a/b".into()))
        );
        let e = c.create(s, "/e", "", CreateMode::Ephemeral, false).unwrap();
        assert!(matches!(
            c.create(s, &format!("{e}/kid"), "", CreateMode::Persistent, false),
            Err(CoordError::EphemeralParent(_))
        ));
    }

    #[test]
    fn data_round_trip() {
        let c = Coordinator::new();
        let s = c.open_session().unwrap();
        let p = c
            .create(
                s,
                "/agents/agent",
                "c1__alice",
                CreateMode::EphemeralSequential,
                true,
            )
            .unwrap();
        assert_eq!(c.get_data(&p).unwrap(), "c1__alice");
        let q = c
            .create(s, "/empty", "", CreateMode::Persistent, false)
            .unwrap();
        assert_eq!(c.get_data(&q).unwrap(), "");
        c.delete(&p).unwrap();
        assert_eq!(c.get_data(&p), Err(CoordError::NoNode(p.clone())));
    }

    #[test]
    fn session_expiry_fires_one_update() {
        let c = Coordinator::new();
        let s1 = c.open_session().unwrap();
        let s2 = c.open_session().unwrap();
        c.create(s1, "/agents", "", CreateMode::Persistent, false)
            .unwrap();
        let w = c.watch_children("/agents", true).unwrap();
        assert_eq!(w.receiver().try_recv().unwrap(), Vec::<String>::new());
        c.create(
            s1,
            "/agents/agent",
            "a",
            CreateMode::EphemeralSequential,
            false,
        )
        .unwrap();
        c.create(
            s2,
            "/agents/agent",
            "b",
            CreateMode::EphemeralSequential,
            false,
        )
        .unwrap();
        c.create(
            s2,
            "/agents/agent",
            "c",
            CreateMode::EphemeralSequential,
            false,
        )
        .unwrap();
        assert_eq!(w.receiver().try_iter().count(), 3);
        let removed = c.expire_session(s2).unwrap();
        assert_eq!(removed.len(), 2);
        let updates: Vec<Vec<String>> = w.receiver().try_iter().collect();
        assert_eq!(updates, vec![vec!["agent0000000000".to_owned()]]);
        assert!(!c.session_alive(s2));
        assert!(c
            .create(s2, "/agents/agent", "", CreateMode::Ephemeral, false)
            .is_err());
    }

    #[test]
    fn one_shot_watch_emits_once() {
        let c = Coordinator::new();
        let s = c.open_session().unwrap();
        c.create(s, "/g", "", CreateMode::Persistent, false)
            .unwrap();
        let w = c.watch_children("/g", false).unwrap();
        c.create(s, "/g/k", "", CreateMode::Persistent, false)
            .unwrap();
        assert_eq!(w.receiver().try_iter().count(), 1);
        assert!(matches!(
            c.watch_children("/missing", true),
            Err(CoordError::NoNode(_))
        ));
    }

    #[test]
    fn children_exclude_grandchildren() {
        let c = Coordinator::new();
        let s = c.open_session().unwrap();
        c.create(s, "/a/b/c", "", CreateMode::Persistent, true)
            .unwrap();
        c.create(s, "/a/d", "", CreateMode::Persistent, true)
            .unwrap();
        c.create(s, "/ab", "", CreateMode::Persistent, true)
            .unwrap();
        assert_eq!(c.children("/a").unwrap(), ["b", "d"]);
        assert_eq!(c.children("/").unwrap(), ["a", "ab"]);
    }

    #[test]
    fn unavailable_service_rejects_calls() {
        let c = Coordinator::new();
        c.set_available(false);
        assert_eq!(c.open_session(), Err(CoordError::Unavailable));
        c.set_available(true);
        assert!(c.open_session().is_ok());
    }
}

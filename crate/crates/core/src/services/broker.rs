//! In-memory message broker with point-to-point queues and pub-sub topics.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use crate::message::{EndpointUri, Exchange, ExchangePattern};
use crate::route::{
    spawn_receiver, Component, Consumer, Producer, RouteContext, RouteError, RouteInlet,
};

/// Header overriding the destination name given in the endpoint URI.
pub const DESTINATION_HEADER: &str = "broker.destination";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DestinationKind {
    Queue,
    Topic,
}

#[derive(Default)]
struct BrokerState {
    queues: HashMap<String, (Sender<Exchange>, Receiver<Exchange>)>,
    topics: HashMap<String, Vec<(u64, Sender<Exchange>)>>,
}

#[derive(Clone, Default)]
pub struct Broker {
    state: Arc<Mutex<BrokerState>>,
    next_sub: Arc<AtomicU64>,
}

/// A live topic subscription; unsubscribes on drop.
pub struct Subscription {
    broker: Broker,
    topic: String,
    id: u64,
    rx: Receiver<Exchange>,
}

impl Subscription {
    pub fn receiver(&self) -> &Receiver<Exchange> {
        &self.rx
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(subs) = self.broker.state.lock().topics.get_mut(&self.topic) {
            subs.retain(|(id, _)| *id != self.id);
        }
    }
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    fn queue(&self, name: &str) -> (Sender<Exchange>, Receiver<Exchange>) {
        self.state
            .lock()
            .queues
            .entry(name.to_owned())
            .or_insert_with(unbounded)
            .clone()
    }

    /// Appends to a queue, creating it on demand.
    pub fn send_queue(&self, name: &str, x: Exchange) {
        let _ = self.queue(name).0.send(x);
    }

    /// Copies to every current subscriber; returns how many received it.
    pub fn publish(&self, topic: &str, x: Exchange) -> usize {
        let state = self.state.lock();
        let Some(subs) = state.topics.get(topic) else {
            return 0;
        };
        for (_, tx) in subs {
            let mut copy = x.clone();
            copy.set_pattern(ExchangePattern::InOnly);
            let _ = tx.send(copy);
        }
        subs.len()
    }

    pub fn send(&self, kind: DestinationKind, name: &str, x: Exchange) {
        match kind {
            DestinationKind::Queue => self.send_queue(name, x),
            DestinationKind::Topic => {
                self.publish(name, x);
            }
        }
    }

    /// A competing-consumer handle on a queue.
    pub fn queue_receiver(&self, name: &str) -> Receiver<Exchange> {
        self.queue(name).1
    }

    pub fn queue_depth(&self, name: &str) -> usize {
        self.state
            .lock()
            .queues
            .get(name)
            .map_or(0, |(_, rx)| rx.len())
    }

    pub fn subscribe(&self, topic: &str) -> Subscription {
        let id = self.next_sub.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = unbounded();
        self.state
            .lock()
            .topics
            .entry(topic.to_owned())
            .or_default()
            .push((id, tx));
        Subscription {
            broker: self.clone(),
            topic: topic.to_owned(),
            id,
            rx,
        }
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.state.lock().topics.get(topic).map_or(0, Vec::len)
    }
}

fn parse_destination(uri: &EndpointUri) -> Result<(DestinationKind, String), RouteError> {
    let (kind, name) = uri
        .path
        .split_once(':')
        .ok_or_else(|| RouteError::init(uri, "expected queue:NAME or topic:NAME"))?;
    let kind = match kind {
        "queue" => DestinationKind::Queue,
        "topic" => DestinationKind::Topic,
        other => {
            return Err(RouteError::init(
                uri,
                format!("unknown destination kind `{other}`"),
            ))
        }
    };
    if name.is_empty() {
        return Err(RouteError::init(uri, "empty destination name"));
    }
    Ok((kind, name.to_owned()))
}

/// `broker:queue:NAME` and `broker:topic:NAME`.
pub struct BrokerComponent {
    broker: Broker,
}

impl BrokerComponent {
    pub fn new(broker: Broker) -> Self {
        BrokerComponent { broker }
    }
}

struct BrokerProducer {
    broker: Broker,
    kind: DestinationKind,
    name: String,
}

impl Producer for BrokerProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let mut copy = x.clone();
        copy.set_pattern(ExchangePattern::InOnly);
        let dest = copy
            .in_msg
            .remove_header(DESTINATION_HEADER)
            .map(|v| v.to_text())
            .unwrap_or_else(|| self.name.clone());
        self.broker.send(self.kind, &dest, copy);
        Ok(x)
    }
}

enum Source {
    Queue(Receiver<Exchange>),
    Topic(Broker, String),
}

struct BrokerConsumer {
    name: String,
    source: Source,
    thread: Option<JoinHandle<()>>,
}

impl Consumer for BrokerConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        let (rx, sub) = match &self.source {
            Source::Queue(rx) => (rx.clone(), None),
            Source::Topic(broker, topic) => {
                let sub = broker.subscribe(topic);
                (sub.receiver().clone(), Some(sub))
            }
        };
        self.thread = Some(spawn_receiver(inlet, &self.name, rx, move |em, x| {
            // Holding the subscription keeps the topic delivering to us.
            let _ = &sub;
            if let Err(e) = em.submit(x) {
                tracing::warn!("broker hand-off failed: {e}");
            }
        }));
        Ok(())
    }

    fn stop(&mut self) {
        self.thread.take();
    }
}

impl Component for BrokerComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        let (kind, name) = parse_destination(uri)?;
        Ok(Arc::new(BrokerProducer {
            broker: self.broker.clone(),
            kind,
            name,
        }))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        let (kind, name) = parse_destination(uri)?;
        let source = match kind {
            DestinationKind::Queue => Source::Queue(self.broker.queue_receiver(&name)),
            DestinationKind::Topic => Source::Topic(self.broker.clone(), name.clone()),
        };
        Ok(Box::new(BrokerConsumer {
            name,
            source,
            thread: None,
        }))
    }

    fn receive_once(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Option<Exchange>, RouteError> {
        match parse_destination(uri)? {
            (DestinationKind::Queue, name) => Ok(self.broker.queue_receiver(&name).try_recv().ok()),
            (DestinationKind::Topic, _) => Err(RouteError::init(uri, "topics cannot be polled")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::time::Duration;

    #[test]
    fn queue_is_fifo_and_retains_without_consumers() {
        let b = Broker::new();
        for i in 0..3 {
            b.send_queue("q", Exchange::in_only(format!("m{i}")));
        }
        assert_eq!(b.queue_depth("q"), 3);
        let rx = b.queue_receiver("q");
        let got: Vec<String> = rx.try_iter().map(|x| x.body().to_text()).collect();
        assert_eq!(got, ["m0", "m1", "m2"]);
    }

    #[test]
    fn topic_copies_to_current_subscribers_only() {
        let b = Broker::new();
        assert_eq!(b.publish("t", Exchange::in_only("early")), 0);
        let s1 = b.subscribe("t");
        let s2 = b.subscribe("t");
        assert_eq!(
            b.publish("t", Exchange::in_only("hello").with_header("k", "v")),
            2
        );
        for s in [&s1, &s2] {
            let x = s.receiver().try_recv().unwrap();
            assert_eq!(x.body().to_text(), "hello");
            assert_eq!(x.header("k").unwrap().to_text(), "v");
            assert!(s.receiver().try_recv().is_err());
        }
        drop(s1);
        assert_eq!(b.subscriber_count("t"), 1);
    }

    #[test]
    fn competing_consumers_exactly_once() {
        let b = Broker::new();
        let n = 1000;
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let rx = b.queue_receiver("work");
                std::thread::spawn(move || {
                    let mut seen = Vec::new();
                    while let Ok(x) = rx.recv_timeout(Duration::from_millis(200)) {
                        seen.push(x.body().to_text());
                    }
                    seen
                })
            })
            .collect();
        for i in 0..n {
            b.send_queue("work", Exchange::in_only(i.to_string()));
        }
        let all: Vec<String> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        assert_eq!(all.len(), n);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), n);
    }
}

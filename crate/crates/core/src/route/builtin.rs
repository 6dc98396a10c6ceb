//! In-process components every context carries: `direct:`, `buffered:`,
//! `mock:` and `control:`.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};

use super::{
    spawn_receiver, Component, Consumer, Producer, RouteContext, RouteError, RouteInlet,
    WeakContext,
};
use crate::message::{BodyValue, EndpointUri, Exchange};

pub(super) fn install(ctx: &RouteContext) {
    ctx.add_component("direct", Arc::new(DirectComponent));
    ctx.add_component("buffered", Arc::new(BufferedComponent));
    ctx.add_component("mock", Arc::new(MockComponent));
    ctx.add_component("control", Arc::new(ControlComponent));
}

fn context_gone() -> RouteError {
    RouteError::Config("route context is gone".into())
}

/// Synchronous hand-off to the route consuming `direct:NAME`.
struct DirectComponent;

struct DirectProducer {
    name: String,
    ctx: WeakContext,
}

impl Producer for DirectProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let ctx = self.ctx.upgrade().ok_or_else(context_gone)?;
        let inlet = ctx
            .direct_inlet(&self.name)
            .ok_or_else(|| RouteError::NoConsumer(format!("direct:{}", self.name)))?;
        inlet.process_inline(x)
    }
}

struct DirectConsumer {
    name: String,
    ctx: WeakContext,
}

impl Consumer for DirectConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        self.ctx
            .upgrade()
            .ok_or_else(context_gone)?
            .register_direct(&self.name, inlet)
    }

    fn stop(&mut self) {
        if let Some(ctx) = self.ctx.upgrade() {
            ctx.unregister_direct(&self.name);
        }
    }
}

impl Component for DirectComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        Ok(Arc::new(DirectProducer {
            name: uri.path.clone(),
            ctx: ctx.downgrade(),
        }))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        Ok(Box::new(DirectConsumer {
            name: uri.path.clone(),
            ctx: ctx.downgrade(),
        }))
    }
}

/// Asynchronous in-memory queue: `buffered:NAME`. Messages sent while the
/// consuming route is suspended or stopped wait in the queue.
struct BufferedComponent;

struct BufferedProducer {
    tx: Sender<Exchange>,
}

impl Producer for BufferedProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let mut copy = x.clone();
        copy.set_pattern(crate::message::ExchangePattern::InOnly);
        self.tx
            .send(copy)
            .map_err(|_| RouteError::Config("buffered queue closed".into()))?;
        Ok(x)
    }
}

struct BufferedConsumer {
    name: String,
    rx: Receiver<Exchange>,
    thread: Option<JoinHandle<()>>,
}

impl Consumer for BufferedConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        let rx = self.rx.clone();
        self.thread = Some(spawn_receiver(inlet, &self.name, rx, |em, x| {
            if let Err(e) = em.submit(x) {
                tracing::warn!("buffered hand-off failed: {e}");
            }
        }));
        Ok(())
    }

    fn stop(&mut self) {
        // The poller notices the stopped gate on its own; never join here
        // since stop may run on a route thread.
        self.thread.take();
    }
}

impl Component for BufferedComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        Ok(Arc::new(BufferedProducer {
            tx: ctx.buffered_queue(&uri.path).0,
        }))
    }

    fn create_consumer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        Ok(Box::new(BufferedConsumer {
            name: uri.path.clone(),
            rx: ctx.buffered_queue(&uri.path).1,
            thread: None,
        }))
    }

    fn receive_once(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Option<Exchange>, RouteError> {
        Ok(ctx.buffered_queue(&uri.path).1.try_recv().ok())
    }
}

/// Captures every exchange sent to it, for assertions.
#[derive(Clone, Default)]
pub struct MockEndpoint {
    inner: Arc<(Mutex<Vec<Exchange>>, Condvar)>,
}

impl MockEndpoint {
    pub fn received(&self) -> Vec<Exchange> {
        self.inner.0.lock().clone()
    }

    pub fn bodies(&self) -> Vec<BodyValue> {
        self.inner
            .0
            .lock()
            .iter()
            .map(|x| x.body().clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.0.lock().clear();
    }

    /// Waits until at least `n` exchanges arrived.
    pub fn wait_for(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let (lock, cond) = &*self.inner;
        let mut got = lock.lock();
        while got.len() < n {
            if cond.wait_until(&mut got, deadline).timed_out() {
                return got.len() >= n;
            }
        }
        true
    }

    fn push(&self, x: Exchange) {
        self.inner.0.lock().push(x);
        self.inner.1.notify_all();
    }
}

struct MockComponent;

struct MockProducer(MockEndpoint);

impl Producer for MockProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        self.0.push(x.clone());
        Ok(x)
    }
}

impl Component for MockComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        Ok(Arc::new(MockProducer(ctx.mock(&uri.path))))
    }
}

/// `control:ROUTE?action=start|stop|suspend|resume|restart` changes the
/// named route's lifecycle when an exchange arrives.
struct ControlComponent;

#[derive(Clone, Copy)]
enum Action {
    Start,
    Stop,
    Suspend,
    Resume,
    Restart,
}

struct ControlProducer {
    route: String,
    action: Action,
    ctx: WeakContext,
}

impl Producer for ControlProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let ctx = self.ctx.upgrade().ok_or_else(context_gone)?;
        match self.action {
            Action::Start => ctx.start_route(&self.route),
            Action::Stop => ctx.stop_route(&self.route),
            Action::Suspend => ctx.suspend_route(&self.route),
            Action::Resume => ctx.resume_route(&self.route),
            Action::Restart => ctx.restart_route(&self.route),
        }?;
        Ok(x)
    }
}

impl Component for ControlComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        let action = match uri.param("action") {
            Some("start") => Action::Start,
            Some("stop") => Action::Stop,
            Some("suspend") => Action::Suspend,
            Some("resume") => Action::Resume,
            Some("restart") => Action::Restart,
            other => return Err(RouteError::init(uri, format!("unknown action {other:?}"))),
        };
        if uri.path.is_empty() {
            return Err(RouteError::init(uri, "missing route id"));
        }
        Ok(Arc::new(ControlProducer {
            route: uri.path.clone(),
            action,
            ctx: ctx.downgrade(),
        }))
    }
}

//! `timer:NAME?delay=&period=` fires empty exchanges.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::message::{EndpointUri, Exchange};
use crate::route::{Component, Consumer, RouteContext, RouteError, RouteInlet, RouteState};

pub const NAME_HEADER: &str = "timer.name";
pub const COUNTER_HEADER: &str = "timer.counter";

pub struct TimerComponent;

struct TimerConsumer {
    name: String,
    delay: Duration,
    period: Option<Duration>,
    thread: Option<JoinHandle<()>>,
}

fn millis(uri: &EndpointUri, key: &str) -> Result<Option<Duration>, RouteError> {
    uri.param(key)
        .map(|v| {
            v.parse::<u64>()
                .map(Duration::from_millis)
                .map_err(|_| RouteError::init(uri, format!("{key} must be milliseconds")))
        })
        .transpose()
}

impl Consumer for TimerConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        let (name, delay, period) = (self.name.clone(), self.delay, self.period);
        let thread = std::thread::Builder::new()
            .name(format!("timer-{name}"))
            .spawn(move || {
                if !inlet.gate().sleep(delay) {
                    return;
                }
                let mut counter = 0u64;
                loop {
                    if inlet.gate().wait_while_suspended() == RouteState::Stopped {
                        return;
                    }
                    counter += 1;
                    let x = Exchange::in_only("")
                        .with_header(NAME_HEADER, name.as_str())
                        .with_header(COUNTER_HEADER, counter as f64);
                    if let Some(Err(e)) = inlet.when_started(|em| em.submit(x)) {
                        tracing::warn!("timer hand-off failed: {e}");
                    }
                    match period {
                        Some(p) if inlet.gate().sleep(p) => {}
                        _ => return,
                    }
                }
            })
            .map_err(|e| RouteError::Config(format!("cannot spawn timer thread: {e}")))?;
        self.thread = Some(thread);
        Ok(())
    }

    fn stop(&mut self) {
        self.thread.take();
    }
}

impl Component for TimerComponent {
    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        Ok(Box::new(TimerConsumer {
            name: uri.path.clone(),
            delay: millis(uri, "delay")?.unwrap_or_default(),
            period: millis(uri, "period")?.filter(|p| !p.is_zero()),
            thread: None,
        }))
    }
}

/// Shared handle for registration.
pub fn component() -> Arc<dyn Component> {
    Arc::new(TimerComponent)
}

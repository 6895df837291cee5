//! Wall-clock push delivery.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tracing::{debug, warn};

use super::{Broker, Delivery, DeliveryOutcome, PushEnvelope, ATTR_OBJECT_ID};

/// Upper bound on how long the loop sleeps between scans.
pub const SCHEDULER_TICK: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushResult {
    Status(u16),
    /// Connection refused, reset, timed out, ...
    Failed(String),
}

impl PushResult {
    pub fn outcome(&self) -> DeliveryOutcome {
        match self {
            PushResult::Status(s) => DeliveryOutcome::from_status(*s),
            PushResult::Failed(_) => DeliveryOutcome::Failed,
        }
    }
}

/// Something that accepts pushed envelopes: an HTTP URL or an in-process
/// handler.
pub trait PushEndpoint: Send + Sync {
    fn push(&self, body: &[u8], timeout: Duration) -> PushResult;
}

impl<F> PushEndpoint for F
where
    F: Fn(&[u8]) -> u16 + Send + Sync,
{
    fn push(&self, body: &[u8], _timeout: Duration) -> PushResult {
        PushResult::Status(self(body))
    }
}

/// POSTs envelopes as `application/json`.
pub struct HttpEndpoint {
    url: String,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        HttpEndpoint { url: url.into() }
    }
}

impl PushEndpoint for HttpEndpoint {
    fn push(&self, body: &[u8], timeout: Duration) -> PushResult {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        match agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
        {
            Ok(resp) => PushResult::Status(resp.status().as_u16()),
            Err(e) => PushResult::Failed(e.to_string()),
        }
    }
}

/// Forwards every delivery, but answers 500 to the first delivery of each
/// selected object so the broker has to redeliver work that was in fact done.
pub struct FaultInjectingEndpoint {
    inner: Arc<dyn PushEndpoint>,
    faulty_objects: HashSet<String>,
    already_failed: Mutex<HashSet<String>>,
}

impl FaultInjectingEndpoint {
    pub fn new(inner: Arc<dyn PushEndpoint>, faulty_objects: HashSet<String>) -> Self {
        FaultInjectingEndpoint {
            inner,
            faulty_objects,
            already_failed: Mutex::new(HashSet::new()),
        }
    }

    pub fn injected(&self) -> usize {
        self.already_failed.lock().unwrap().len()
    }
}

impl PushEndpoint for FaultInjectingEndpoint {
    fn push(&self, body: &[u8], timeout: Duration) -> PushResult {
        let result = self.inner.push(body, timeout);
        let object = PushEnvelope::from_json(body)
            .ok()
            .and_then(|e| e.attribute(ATTR_OBJECT_ID).map(str::to_string));
        if let Some(object) = object {
            if self.faulty_objects.contains(&object)
                && self.already_failed.lock().unwrap().insert(object.clone())
            {
                debug!(%object, "injecting 500 on first delivery");
                return PushResult::Status(500);
            }
        }
        result
    }
}

/// Background thread pushing one subscription's messages to an endpoint.
/// Each delivery runs on its own thread so a slow endpoint never blocks
/// other messages.
pub struct DeliveryLoop {
    stop: Arc<AtomicBool>,
    broker: Arc<Broker>,
    handle: Option<JoinHandle<()>>,
}

impl DeliveryLoop {
    pub fn spawn(broker: Arc<Broker>, subscription: &str, endpoint: Arc<dyn PushEndpoint>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let stop = stop.clone();
            let broker = broker.clone();
            let subscription = subscription.to_string();
            thread::Builder::new()
                .name(format!("deliver-{subscription}"))
                .spawn(move || run(&broker, &subscription, endpoint, &stop))
                .expect("spawn delivery loop")
        };
        DeliveryLoop {
            stop,
            broker,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.broker.notify_waiters();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DeliveryLoop {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run(
    broker: &Arc<Broker>,
    subscription: &str,
    endpoint: Arc<dyn PushEndpoint>,
    stop: &AtomicBool,
) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match broker.lease_due(subscription) {
            Ok(deliveries) => {
                for d in deliveries {
                    let broker = broker.clone();
                    let endpoint = endpoint.clone();
                    workers.push(thread::spawn(move || push_one(&broker, &endpoint, d)));
                }
            }
            Err(e) => {
                warn!(subscription, error = %e, "delivery loop cannot lease");
            }
        }
        workers.retain(|h| !h.is_finished());
        let now = broker.clock().now();
        let wait = broker
            .next_wakeup(subscription)
            .map(|t| t.since(now))
            .unwrap_or(SCHEDULER_TICK)
            .clamp(Duration::from_millis(1), SCHEDULER_TICK);
        broker.wait_for_change(wait);
    }
    for h in workers {
        let _ = h.join();
    }
}

fn push_one(broker: &Broker, endpoint: &Arc<dyn PushEndpoint>, d: Delivery) {
    let timeout = d
        .deadline
        .since(broker.clock().now())
        .max(Duration::from_millis(1));
    let body = d.envelope().to_json();
    let result = endpoint.push(&body, timeout);
    if let PushResult::Failed(reason) = &result {
        warn!(subscription = %d.subscription, id = %d.message.id, attempt = d.attempt, %reason, "push failed");
    }
    if let Err(e) = broker.report(&d.subscription, d.message.id, d.attempt, result.outcome()) {
        debug!(error = %e, "delivery response not applied");
    }
}

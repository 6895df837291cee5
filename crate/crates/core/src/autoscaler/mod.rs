//! Serverless runtime emulation: a fleet of single-request instances that
//! scales from `min_instances` up to `max_instances` on demand, pays a cold
//! start for each new instance and retires instances after an idle timeout.

mod fleet;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::clock::{human_duration, Clock, Timestamp};
use crate::http::Reply;
use crate::pubsub::{PushEndpoint, PushResult};

pub use fleet::{Admission, Assignment, Fleet, Instance, InstanceId, InstanceState, RequestId};

/// Sampling and scale-down cadence.
pub const TICK: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScalerError {
    #[error("invalid scaler config: {0}")]
    InvalidConfig(String),
    #[error("request queue full ({queued} waiting)")]
    Overload { queued: usize },
    #[error("autoscaler is shutting down")]
    ShutdownInProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalerConfig {
    pub min_instances: usize,
    pub max_instances: usize,
    #[serde(with = "human_duration")]
    pub cold_start: Duration,
    #[serde(with = "human_duration")]
    pub idle_timeout: Duration,
    /// Always 1: an instance serves one request at a time.
    pub concurrency_per_instance: usize,
    /// Cost units per instance-second.
    pub cost_rate: f64,
    /// Requests allowed to wait for an instance; unbounded when absent.
    pub queue_bound: Option<usize>,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            min_instances: 0,
            max_instances: 16,
            cold_start: Duration::from_secs(2),
            idle_timeout: Duration::from_secs(60),
            concurrency_per_instance: 1,
            cost_rate: 1.0,
            queue_bound: None,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<(), ScalerError> {
        let bad = |m: String| Err(ScalerError::InvalidConfig(m));
        if self.max_instances == 0 {
            return bad("max_instances must be >= 1".into());
        }
        if self.min_instances > self.max_instances {
            return bad(format!(
                "min_instances {} exceeds max_instances {}",
                self.min_instances, self.max_instances
            ));
        }
        if self.concurrency_per_instance != 1 {
            return bad(format!(
                "concurrency_per_instance must be 1, got {}",
                self.concurrency_per_instance
            ));
        }
        if !(self.cost_rate.is_finite() && self.cost_rate >= 0.0) {
            return bad(format!(
                "cost_rate {} must be a non-negative number",
                self.cost_rate
            ));
        }
        Ok(())
    }

    /// Parse `key = value` TOML, e.g. `cold_start = "2s"`.
    pub fn from_toml(text: &str) -> Result<Self, ScalerError> {
        let config: ScalerConfig =
            toml::from_str(text).map_err(|e| ScalerError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScalerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScalerError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingSample {
    /// Seconds since the start of the run.
    pub t: f64,
    pub active_instances: usize,
    pub busy_instances: usize,
    pub queued_requests: usize,
}

pub const METRICS_HEADER: &str = "t_seconds,active,busy,queued";

pub fn metrics_csv(samples: &[ScalingSample]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.t, s.active_instances, s.busy_instances, s.queued_requests
        );
    }
    out
}

/// What an instance runs. Each instance gets its own handler.
pub trait ServiceHandler: Send + Sync {
    fn handle(&self, body: &[u8]) -> Reply;
}

impl<F> ServiceHandler for F
where
    F: Fn(&[u8]) -> Reply + Send + Sync,
{
    fn handle(&self, body: &[u8]) -> Reply {
        self(body)
    }
}

pub type InstanceFactory = dyn Fn(InstanceId) -> Arc<dyn ServiceHandler> + Send + Sync;

struct State {
    fleet: Fleet,
    assigned: HashMap<RequestId, InstanceId>,
    handlers: HashMap<InstanceId, Arc<dyn ServiceHandler>>,
    samples: Vec<ScalingSample>,
    next_tick: Timestamp,
}

impl State {
    fn advance(&mut self, now: Timestamp) -> bool {
        let mut changed = false;
        for a in self.fleet.poll_ready(now) {
            self.assigned.insert(a.request, a.instance);
            changed = true;
        }
        while self.next_tick <= now {
            let t = self.next_tick;
            if self.fleet.scale_down_tick(t) > 0 {
                let fleet = &self.fleet;
                self.handlers.retain(|id, _| {
                    !matches!(
                        fleet.instances()[id.0 as usize].state,
                        InstanceState::Retired
                    )
                });
            }
            self.samples.push(self.fleet.sample(t));
            self.next_tick = t.saturating_add(TICK);
        }
        changed
    }
}

struct Shared {
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    changed: Condvar,
    factory: Arc<InstanceFactory>,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }
}

/// Threaded runtime over a [`Fleet`]. `dispatch` blocks the caller until an
/// instance has served its request; the caller's thread runs the handler.
pub struct Autoscaler {
    shared: Arc<Shared>,
    ticker: Mutex<Option<JoinHandle<()>>>,
}

impl Autoscaler {
    pub fn start(
        config: ScalerConfig,
        clock: Arc<dyn Clock>,
        factory: Arc<InstanceFactory>,
    ) -> Result<Self, ScalerError> {
        let now = clock.now();
        let fleet = Fleet::new(config, now)?;
        let shared = Arc::new(Shared {
            clock,
            state: Mutex::new(State {
                fleet,
                assigned: HashMap::new(),
                handlers: HashMap::new(),
                samples: Vec::new(),
                next_tick: now,
            }),
            changed: Condvar::new(),
            factory,
            stop: AtomicBool::new(false),
        });
        let ticker = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("autoscaler-tick".into())
                .spawn(move || run_ticker(&shared))
                .expect("spawn ticker")
        };
        Ok(Autoscaler {
            shared,
            ticker: Mutex::new(Some(ticker)),
        })
    }

    pub fn dispatch(&self, body: &[u8]) -> Result<Reply, ScalerError> {
        let shared = &self.shared;
        let mut st = shared.lock();
        let now = shared.clock.now();
        st.advance(now);
        let (instance, request) = match st.fleet.submit(now)? {
            Admission::Assigned(a) => (a.instance, a.request),
            Admission::Queued { request, started } => {
                if let Some((id, ready_at)) = started {
                    debug!(instance = id.0, ready_at = %ready_at, "cold start");
                }
                shared.changed.notify_all();
                loop {
                    if let Some(id) = st.assigned.remove(&request) {
                        break (id, request);
                    }
                    st = shared
                        .changed
                        .wait_timeout(st, Duration::from_millis(50))
                        .unwrap()
                        .0;
                }
            }
        };
        let handler = st
            .handlers
            .entry(instance)
            .or_insert_with(|| (shared.factory)(instance))
            .clone();
        drop(st);

        debug!(instance = instance.0, request = request.0, "serving");
        let reply = handler.handle(body);

        let mut st = shared.lock();
        let now = shared.clock.now();
        if let Some(next) = st.fleet.complete(instance, now) {
            st.assigned.insert(next.request, next.instance);
        }
        st.advance(now);
        shared.changed.notify_all();
        Ok(reply)
    }

    pub fn metrics_series(&self) -> Vec<ScalingSample> {
        self.shared.lock().samples.clone()
    }

    pub fn metered_cost(&self) -> f64 {
        let st = self.shared.lock();
        st.fleet.metered_cost(self.shared.clock.now())
    }

    pub fn fleet_snapshot(&self) -> Fleet {
        self.shared.lock().fleet.clone()
    }

    /// Block until the fleet is back at its floor with nothing in flight.
    pub fn wait_settled(&self, limit: Duration) -> bool {
        let deadline = self.shared.clock.now().saturating_add(limit);
        let mut st = self.shared.lock();
        loop {
            if st.fleet.is_settled() {
                return true;
            }
            if self.shared.clock.now() >= deadline {
                return false;
            }
            st = self
                .shared
                .changed
                .wait_timeout(st, Duration::from_millis(50))
                .unwrap()
                .0;
        }
    }

    /// Refuse new requests, wait for in-flight ones and stop the ticker.
    pub fn shutdown(&self) {
        {
            let mut st = self.shared.lock();
            st.fleet.begin_shutdown();
            while st.fleet.busy() > 0 || st.fleet.queue_len() > 0 {
                st = self
                    .shared
                    .changed
                    .wait_timeout(st, Duration::from_millis(50))
                    .unwrap()
                    .0;
            }
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.changed.notify_all();
        if let Some(h) = self.ticker.lock().unwrap().take() {
            let _ = h.join();
        }
        let st = self.shared.lock();
        info!(
            instances = st.fleet.instances().len(),
            cost = st.fleet.metered_cost(self.shared.clock.now()),
            "autoscaler stopped"
        );
    }
}

impl Drop for Autoscaler {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.changed.notify_all();
        if let Some(h) = self.ticker.get_mut().unwrap().take() {
            let _ = h.join();
        }
    }
}

fn run_ticker(shared: &Shared) {
    let mut st = shared.lock();
    while !shared.stop.load(Ordering::SeqCst) {
        let now = shared.clock.now();
        if st.advance(now) {
            shared.changed.notify_all();
        }
        let next = st
            .fleet
            .next_ready()
            .map_or(st.next_tick, |r| r.min(st.next_tick));
        let wait = next
            .since(now)
            .clamp(Duration::from_millis(1), Duration::from_millis(50));
        st = shared.changed.wait_timeout(st, wait).unwrap().0;
    }
}

impl PushEndpoint for Autoscaler {
    fn push(&self, body: &[u8], _timeout: Duration) -> PushResult {
        match self.dispatch(body) {
            Ok(reply) => PushResult::Status(reply.status),
            Err(ScalerError::Overload { .. }) => PushResult::Status(429),
            Err(e) => PushResult::Failed(e.to_string()),
        }
    }
}

//! Instance fleet as a pure state machine. Callers feed it the current time;
//! it never reads a clock itself, so the same code drives both the threaded
//! runtime and the discrete-event simulation.

use std::collections::VecDeque;
use std::time::Duration;

use super::{ScalerConfig, ScalerError, ScalingSample};
use crate::clock::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Starting { ready_at: Timestamp },
    Idle { since: Timestamp },
    Busy { request: RequestId },
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: InstanceId,
    pub created_at: Timestamp,
    pub retired_at: Option<Timestamp>,
    pub state: InstanceState,
    pub served: u64,
}

/// A request bound to the instance that will serve it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub instance: InstanceId,
    pub request: RequestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    /// A warm instance took the request right away.
    Assigned(Assignment),
    /// Waiting in the queue; `started` is set when a new instance was created
    /// for it.
    Queued {
        request: RequestId,
        started: Option<(InstanceId, Timestamp)>,
    },
}

#[derive(Debug, Clone)]
pub struct Fleet {
    config: ScalerConfig,
    epoch: Timestamp,
    instances: Vec<Instance>,
    queue: VecDeque<RequestId>,
    next_request: u64,
    shutting_down: bool,
}

impl Fleet {
    /// Start a fleet at `epoch` with `min_instances` already warm.
    pub fn new(config: ScalerConfig, epoch: Timestamp) -> Result<Self, ScalerError> {
        config.validate()?;
        let mut fleet = Fleet {
            config,
            epoch,
            instances: Vec::new(),
            queue: VecDeque::new(),
            next_request: 0,
            shutting_down: false,
        };
        for _ in 0..fleet.config.min_instances {
            let id = InstanceId(fleet.instances.len() as u32);
            fleet.instances.push(Instance {
                id,
                created_at: epoch,
                retired_at: None,
                state: InstanceState::Idle { since: epoch },
                served: 0,
            });
        }
        Ok(fleet)
    }

    pub fn config(&self) -> &ScalerConfig {
        &self.config
    }

    pub fn epoch(&self) -> Timestamp {
        self.epoch
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_queued(&self, request: RequestId) -> bool {
        self.queue.contains(&request)
    }

    fn count(&self, pred: impl Fn(&InstanceState) -> bool) -> usize {
        self.instances.iter().filter(|i| pred(&i.state)).count()
    }

    pub fn active(&self) -> usize {
        self.count(|s| !matches!(s, InstanceState::Retired))
    }

    pub fn busy(&self) -> usize {
        self.count(|s| matches!(s, InstanceState::Busy { .. }))
    }

    pub fn starting(&self) -> usize {
        self.count(|s| matches!(s, InstanceState::Starting { .. }))
    }

    /// Nothing running, starting or queued, and no more than the floor alive.
    pub fn is_settled(&self) -> bool {
        self.queue.is_empty()
            && self.busy() == 0
            && self.starting() == 0
            && self.active() <= self.config.min_instances
    }

    pub fn begin_shutdown(&mut self) {
        self.shutting_down = true;
    }

    pub fn submit(&mut self, now: Timestamp) -> Result<Admission, ScalerError> {
        if self.shutting_down {
            return Err(ScalerError::ShutdownInProgress);
        }
        // Longest-idle first keeps recently used instances warm.
        let idle = self
            .instances
            .iter()
            .filter_map(|i| match i.state {
                InstanceState::Idle { since } => Some((since, i.id)),
                _ => None,
            })
            .min();
        if let Some((_, id)) = idle {
            let request = self.new_request();
            return Ok(Admission::Assigned(self.assign(id, request)));
        }
        if let Some(bound) = self.config.queue_bound {
            if self.queue.len() >= bound {
                return Err(ScalerError::Overload {
                    queued: self.queue.len(),
                });
            }
        }
        let request = self.new_request();
        self.queue.push_back(request);
        let started =
            if self.active() < self.config.max_instances && self.queue.len() > self.starting() {
                let ready_at = now.saturating_add(self.config.cold_start);
                let id = InstanceId(self.instances.len() as u32);
                self.instances.push(Instance {
                    id,
                    created_at: now,
                    retired_at: None,
                    state: InstanceState::Starting { ready_at },
                    served: 0,
                });
                Some((id, ready_at))
            } else {
                None
            };
        Ok(Admission::Queued { request, started })
    }

    fn new_request(&mut self) -> RequestId {
        self.next_request += 1;
        RequestId(self.next_request)
    }

    fn assign(&mut self, id: InstanceId, request: RequestId) -> Assignment {
        let inst = &mut self.instances[id.0 as usize];
        inst.state = InstanceState::Busy { request };
        inst.served += 1;
        Assignment {
            instance: id,
            request,
        }
    }

    /// Earliest pending cold-start completion.
    pub fn next_ready(&self) -> Option<Timestamp> {
        self.instances
            .iter()
            .filter_map(|i| match i.state {
                InstanceState::Starting { ready_at } => Some(ready_at),
                _ => None,
            })
            .min()
    }

    /// Finish every cold start due by `now`; each new instance takes the
    /// queue head if there is one.
    pub fn poll_ready(&mut self, now: Timestamp) -> Vec<Assignment> {
        let mut due: Vec<(Timestamp, InstanceId)> = self
            .instances
            .iter()
            .filter_map(|i| match i.state {
                InstanceState::Starting { ready_at } if ready_at <= now => Some((ready_at, i.id)),
                _ => None,
            })
            .collect();
        due.sort();
        due.into_iter()
            .filter_map(|(ready_at, id)| {
                self.instances[id.0 as usize].state = InstanceState::Idle { since: ready_at };
                self.take_next(id)
            })
            .collect()
    }

    /// `instance` finished its request at `now`.
    pub fn complete(&mut self, instance: InstanceId, now: Timestamp) -> Option<Assignment> {
        let inst = &mut self.instances[instance.0 as usize];
        assert!(
            matches!(inst.state, InstanceState::Busy { .. }),
            "completion for instance {} in state {:?}",
            instance.0,
            inst.state
        );
        inst.state = InstanceState::Idle { since: now };
        self.take_next(instance)
    }

    fn take_next(&mut self, instance: InstanceId) -> Option<Assignment> {
        let request = self.queue.pop_front()?;
        Some(self.assign(instance, request))
    }

    /// Retire instances idle for at least the idle timeout, longest-idle
    /// first, without dropping below the floor. Busy and starting instances
    /// are never touched.
    pub fn scale_down_tick(&mut self, now: Timestamp) -> usize {
        let mut idle: Vec<(Timestamp, InstanceId)> = self
            .instances
            .iter()
            .filter_map(|i| match i.state {
                InstanceState::Idle { since } if now.since(since) >= self.config.idle_timeout => {
                    Some((since, i.id))
                }
                _ => None,
            })
            .collect();
        idle.sort();
        let spare = self.active().saturating_sub(self.config.min_instances);
        let mut retired = 0;
        for (_, id) in idle.into_iter().take(spare) {
            let inst = &mut self.instances[id.0 as usize];
            inst.state = InstanceState::Retired;
            inst.retired_at = Some(now);
            retired += 1;
        }
        retired
    }

    pub fn sample(&self, now: Timestamp) -> ScalingSample {
        ScalingSample {
            t: now.since(self.epoch).as_secs_f64(),
            active_instances: self.active(),
            busy_instances: self.busy(),
            queued_requests: self.queue.len(),
        }
    }

    /// Total instance lifetime up to `now`.
    pub fn instance_time(&self, now: Timestamp) -> Duration {
        self.instances
            .iter()
            .map(|i| i.retired_at.unwrap_or(now).since(i.created_at))
            .sum()
    }

    pub fn metered_cost(&self, now: Timestamp) -> f64 {
        self.instance_time(now).as_secs_f64() * self.config.cost_rate
    }
}

//! Topic-based broker with push subscriptions.
//!
//! Publishing fans a message out to every subscription attached to the topic
//! at publish time. Each subscription tracks its own copy of the message
//! through `pending -> in-flight -> acked`, with failed or expired deliveries
//! returning to pending under exponential backoff until the attempt budget is
//! spent, at which point the message is dead-lettered.
//!
//! The broker is a state machine driven through a [`Clock`]: the threaded
//! [`delivery`] loop drives it in wall time, while the benchmark's
//! discrete-event driver drives the same methods on a virtual clock.

pub mod delivery;
pub mod wire;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::json;
use thiserror::Error;
use tracing::{debug, error, warn};

use crate::clock::{Clock, Timestamp};
use crate::object_store::{NotificationSink, ObjectEvent};

pub use delivery::{DeliveryLoop, FaultInjectingEndpoint, HttpEndpoint, PushEndpoint, PushResult};
pub use wire::{PushEnvelope, WireError};

pub const ATTR_EVENT_TYPE: &str = "eventType";
pub const ATTR_BUCKET_ID: &str = "bucketId";
pub const ATTR_OBJECT_ID: &str = "objectId";
pub const ATTR_EVENT_TIME: &str = "eventTime";

pub const DEFAULT_ACK_DEADLINE: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_DELIVERY_ATTEMPTS: u32 = 5;
pub const DEFAULT_DEAD_LETTER_TOPIC: &str = "wsi-dicom-dead";
pub const BACKOFF_BASE: Duration = Duration::from_millis(500);
pub const BACKOFF_CAP: Duration = Duration::from_secs(30);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PubSubError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {0:?} already exists")]
    TopicExists(String),
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(String),
    #[error("subscription {0:?} already exists")]
    SubscriptionExists(String),
    #[error("invalid subscription config: {0}")]
    InvalidConfig(String),
    /// Ack or nack for a message that is not in flight. Benign: duplicate
    /// acks and late responses land here.
    #[error("message {0} is not in flight on {1:?}")]
    UnknownMessage(MessageId, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: MessageId,
    pub publish_time: Timestamp,
    pub attributes: IndexMap<String, String>,
    pub data: Vec<u8>,
}

/// Attributes for a storage creation event, in wire order.
pub fn storage_event_attributes(
    bucket: &str,
    key: &str,
    event_time: Timestamp,
) -> IndexMap<String, String> {
    let mut attrs = IndexMap::new();
    attrs.insert(
        ATTR_EVENT_TYPE.to_string(),
        crate::object_store::OBJECT_FINALIZE.to_string(),
    );
    attrs.insert(ATTR_BUCKET_ID.to_string(), bucket.to_string());
    attrs.insert(ATTR_OBJECT_ID.to_string(), key.to_string());
    attrs.insert(ATTR_EVENT_TIME.to_string(), event_time.to_rfc3339());
    attrs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionConfig {
    pub name: String,
    pub topic: String,
    pub endpoint: String,
    pub ack_deadline: Duration,
    pub max_delivery_attempts: u32,
    pub dead_letter: Option<String>,
}

impl SubscriptionConfig {
    pub fn new(name: &str, topic: &str, endpoint: &str) -> Self {
        SubscriptionConfig {
            name: name.to_string(),
            topic: topic.to_string(),
            endpoint: endpoint.to_string(),
            ack_deadline: DEFAULT_ACK_DEADLINE,
            max_delivery_attempts: DEFAULT_MAX_DELIVERY_ATTEMPTS,
            dead_letter: Some(DEFAULT_DEAD_LETTER_TOPIC.to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), PubSubError> {
        if self.ack_deadline.is_zero() {
            return Err(PubSubError::InvalidConfig(
                "ack_deadline must be > 0".into(),
            ));
        }
        if self.max_delivery_attempts == 0 {
            return Err(PubSubError::InvalidConfig(
                "max_delivery_attempts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Delay before the next attempt after `attempts` failed deliveries.
pub fn redelivery_backoff(attempts: u32) -> Duration {
    let shift = attempts.saturating_sub(1).min(16);
    (BACKOFF_BASE * (1u32 << shift)).min(BACKOFF_CAP)
}

/// One leased delivery of a message to a subscription endpoint.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub subscription: String,
    pub message: Arc<Message>,
    pub attempt: u32,
    pub deadline: Timestamp,
}

impl Delivery {
    pub fn envelope(&self) -> PushEnvelope {
        PushEnvelope::new(&self.message, &self.subscription)
    }
}

/// Result of one push attempt as seen by the broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    /// 2xx response.
    Acked,
    /// Non-2xx, connection error or timeout.
    Failed,
}

impl DeliveryOutcome {
    pub fn from_status(status: u16) -> Self {
        if (200..300).contains(&status) {
            DeliveryOutcome::Acked
        } else {
            DeliveryOutcome::Failed
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubscriptionStats {
    /// Messages enqueued on this subscription (publishes × fan-out share).
    pub published: u64,
    pub pending: u64,
    pub in_flight: u64,
    pub acked: u64,
    pub dead_lettered: u64,
    /// Total push attempts handed out.
    pub deliveries: u64,
}

impl SubscriptionStats {
    /// Every enqueued message is in exactly one state.
    pub fn is_conserved(&self) -> bool {
        self.published == self.acked + self.pending + self.in_flight + self.dead_lettered
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending == 0 && self.in_flight == 0
    }
}

#[derive(Debug)]
enum EntryState {
    Pending { eligible_at: Timestamp },
    InFlight { deadline: Timestamp },
}

#[derive(Debug)]
struct Entry {
    message: Arc<Message>,
    attempts: u32,
    state: EntryState,
}

#[derive(Debug)]
struct SubState {
    config: SubscriptionConfig,
    entries: BTreeMap<MessageId, Entry>,
    published: u64,
    acked: u64,
    dead_lettered: u64,
    deliveries: u64,
}

#[derive(Debug, Default)]
struct BrokerState {
    next_id: u64,
    last_publish: Option<Timestamp>,
    topics: BTreeMap<String, Vec<String>>,
    subs: BTreeMap<String, SubState>,
}

pub struct Broker {
    clock: Arc<dyn Clock>,
    state: Mutex<BrokerState>,
    wake: Condvar,
    journal: Option<Mutex<File>>,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker").finish_non_exhaustive()
    }
}

impl Broker {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Broker {
            clock,
            state: Mutex::new(BrokerState::default()),
            wake: Condvar::new(),
            journal: None,
        }
    }

    /// A broker that appends every state change to a JSON-lines file.
    pub fn with_journal(clock: Arc<dyn Clock>, path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Broker {
            journal: Some(Mutex::new(file)),
            ..Broker::new(clock)
        })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn create_topic(&self, name: &str) -> Result<(), PubSubError> {
        let mut st = self.state.lock().unwrap();
        if st.topics.contains_key(name) {
            return Err(PubSubError::TopicExists(name.to_string()));
        }
        st.topics.insert(name.to_string(), Vec::new());
        Ok(())
    }

    pub fn has_topic(&self, name: &str) -> bool {
        self.state.lock().unwrap().topics.contains_key(name)
    }

    pub fn create_subscription(&self, config: SubscriptionConfig) -> Result<(), PubSubError> {
        config.validate()?;
        let mut st = self.state.lock().unwrap();
        if !st.topics.contains_key(&config.topic) {
            return Err(PubSubError::UnknownTopic(config.topic.clone()));
        }
        if let Some(dl) = &config.dead_letter {
            if !st.topics.contains_key(dl) {
                return Err(PubSubError::UnknownTopic(dl.clone()));
            }
        }
        if st.subs.contains_key(&config.name) {
            return Err(PubSubError::SubscriptionExists(config.name.clone()));
        }
        st.topics
            .get_mut(&config.topic)
            .expect("checked above")
            .push(config.name.clone());
        st.subs.insert(
            config.name.clone(),
            SubState {
                config,
                entries: BTreeMap::new(),
                published: 0,
                acked: 0,
                dead_lettered: 0,
                deliveries: 0,
            },
        );
        Ok(())
    }

    pub fn subscription(&self, name: &str) -> Result<SubscriptionConfig, PubSubError> {
        let st = self.state.lock().unwrap();
        st.subs
            .get(name)
            .map(|s| s.config.clone())
            .ok_or_else(|| PubSubError::UnknownSubscription(name.to_string()))
    }

    /// Publish to `topic`, enqueueing on every attached subscription. With no
    /// subscriptions the message is dropped but still gets an id.
    pub fn publish(
        &self,
        topic: &str,
        attributes: IndexMap<String, String>,
        data: Vec<u8>,
    ) -> Result<MessageId, PubSubError> {
        let id = {
            let mut st = self.state.lock().unwrap();
            let now = self.clock.now();
            self.publish_locked(&mut st, topic, attributes, data, now)?
        };
        self.wake.notify_all();
        Ok(id)
    }

    fn publish_locked(
        &self,
        st: &mut BrokerState,
        topic: &str,
        attributes: IndexMap<String, String>,
        data: Vec<u8>,
        now: Timestamp,
    ) -> Result<MessageId, PubSubError> {
        let Some(sub_names) = st.topics.get(topic) else {
            return Err(PubSubError::UnknownTopic(topic.to_string()));
        };
        let sub_names = sub_names.clone();
        st.next_id += 1;
        let id = MessageId(st.next_id);
        let publish_time = st.last_publish.map_or(now, |last| last.max(now));
        st.last_publish = Some(publish_time);
        let message = Arc::new(Message {
            id,
            publish_time,
            attributes,
            data,
        });
        if sub_names.is_empty() {
            debug!(topic, %id, "no subscriptions, message dropped");
        }
        for name in &sub_names {
            let sub = st
                .subs
                .get_mut(name)
                .expect("topic lists only live subscriptions");
            sub.published += 1;
            sub.entries.insert(
                id,
                Entry {
                    message: message.clone(),
                    attempts: 0,
                    state: EntryState::Pending { eligible_at: now },
                },
            );
        }
        self.journal(
            json!({"op": "publish", "topic": topic, "id": id.0, "fanout": sub_names.len()}),
        );
        Ok(id)
    }

    /// Lease every pending message whose backoff has elapsed. Expired
    /// in-flight deliveries are failed first so they can be re-leased once
    /// eligible.
    pub fn lease_due(&self, subscription: &str) -> Result<Vec<Delivery>, PubSubError> {
        let mut st = self.state.lock().unwrap();
        let now = self.clock.now();
        self.expire_locked(&mut st, subscription, now)?;
        let sub = st
            .subs
            .get_mut(subscription)
            .ok_or_else(|| PubSubError::UnknownSubscription(subscription.to_string()))?;
        let deadline = now.saturating_add(sub.config.ack_deadline);
        let mut out = Vec::new();
        for entry in sub.entries.values_mut() {
            if let EntryState::Pending { eligible_at } = entry.state {
                if eligible_at <= now {
                    entry.attempts += 1;
                    entry.state = EntryState::InFlight { deadline };
                    out.push(Delivery {
                        subscription: subscription.to_string(),
                        message: entry.message.clone(),
                        attempt: entry.attempts,
                        deadline,
                    });
                }
            }
        }
        sub.deliveries += out.len() as u64;
        Ok(out)
    }

    /// Fail every in-flight delivery whose ack deadline has passed.
    pub fn expire_deadlines(&self, subscription: &str) -> Result<usize, PubSubError> {
        let mut st = self.state.lock().unwrap();
        let now = self.clock.now();
        let n = self.expire_locked(&mut st, subscription, now)?;
        drop(st);
        if n > 0 {
            self.wake.notify_all();
        }
        Ok(n)
    }

    fn expire_locked(
        &self,
        st: &mut BrokerState,
        subscription: &str,
        now: Timestamp,
    ) -> Result<usize, PubSubError> {
        let sub = st
            .subs
            .get(subscription)
            .ok_or_else(|| PubSubError::UnknownSubscription(subscription.to_string()))?;
        let expired: Vec<MessageId> = sub
            .entries
            .iter()
            .filter(
                |(_, e)| matches!(e.state, EntryState::InFlight { deadline } if deadline <= now),
            )
            .map(|(id, _)| *id)
            .collect();
        for id in &expired {
            warn!(subscription, %id, "ack deadline expired");
            self.fail_locked(st, subscription, *id, now, true);
        }
        Ok(expired.len())
    }

    /// Record the response to a leased delivery. Responses for an attempt
    /// that is no longer in flight (expired, already acked) are ignored.
    pub fn report(
        &self,
        subscription: &str,
        id: MessageId,
        attempt: u32,
        outcome: DeliveryOutcome,
    ) -> Result<(), PubSubError> {
        let mut st = self.state.lock().unwrap();
        let now = self.clock.now();
        let sub = st
            .subs
            .get(subscription)
            .ok_or_else(|| PubSubError::UnknownSubscription(subscription.to_string()))?;
        match sub.entries.get(&id) {
            Some(e) if e.attempts == attempt && matches!(e.state, EntryState::InFlight { .. }) => {}
            _ => {
                debug!(subscription, %id, attempt, ?outcome, "stale delivery response ignored");
                return Err(PubSubError::UnknownMessage(id, subscription.to_string()));
            }
        }
        match outcome {
            DeliveryOutcome::Acked => self.ack_locked(&mut st, subscription, id),
            DeliveryOutcome::Failed => self.fail_locked(&mut st, subscription, id, now, true),
        }
        drop(st);
        self.wake.notify_all();
        Ok(())
    }

    /// Acknowledge an in-flight message; it will never be delivered again.
    pub fn ack(&self, subscription: &str, id: MessageId) -> Result<(), PubSubError> {
        let mut st = self.state.lock().unwrap();
        self.require_in_flight(&st, subscription, id)?;
        self.ack_locked(&mut st, subscription, id);
        drop(st);
        self.wake.notify_all();
        Ok(())
    }

    /// Return an in-flight message to pending, eligible immediately.
    pub fn nack(&self, subscription: &str, id: MessageId) -> Result<(), PubSubError> {
        let mut st = self.state.lock().unwrap();
        let now = self.clock.now();
        self.require_in_flight(&st, subscription, id)?;
        self.fail_locked(&mut st, subscription, id, now, false);
        drop(st);
        self.wake.notify_all();
        Ok(())
    }

    fn require_in_flight(
        &self,
        st: &BrokerState,
        subscription: &str,
        id: MessageId,
    ) -> Result<(), PubSubError> {
        let sub = st
            .subs
            .get(subscription)
            .ok_or_else(|| PubSubError::UnknownSubscription(subscription.to_string()))?;
        match sub.entries.get(&id) {
            Some(Entry {
                state: EntryState::InFlight { .. },
                ..
            }) => Ok(()),
            _ => {
                warn!(subscription, %id, "ack/nack for message not in flight");
                Err(PubSubError::UnknownMessage(id, subscription.to_string()))
            }
        }
    }

    fn ack_locked(&self, st: &mut BrokerState, subscription: &str, id: MessageId) {
        let sub = st.subs.get_mut(subscription).expect("caller checked");
        sub.entries.remove(&id);
        sub.acked += 1;
        self.journal(json!({"op": "ack", "subscription": subscription, "id": id.0}));
    }

    fn fail_locked(
        &self,
        st: &mut BrokerState,
        subscription: &str,
        id: MessageId,
        now: Timestamp,
        backoff: bool,
    ) {
        let sub = st.subs.get_mut(subscription).expect("caller checked");
        let max = sub.config.max_delivery_attempts;
        let entry = sub.entries.get_mut(&id).expect("caller checked");
        if entry.attempts >= max {
            let entry = sub.entries.remove(&id).expect("present");
            sub.dead_lettered += 1;
            let dead_letter = sub.config.dead_letter.clone();
            self.journal(json!({"op": "dead-letter", "subscription": subscription, "id": id.0}));
            match dead_letter {
                Some(topic) => {
                    warn!(subscription, %id, attempts = entry.attempts, %topic, "dead-lettering message");
                    let mut attrs = entry.message.attributes.clone();
                    attrs.insert("sourceSubscription".into(), subscription.to_string());
                    attrs.insert("sourceMessageId".into(), id.to_string());
                    if let Err(e) =
                        self.publish_locked(st, &topic, attrs, entry.message.data.clone(), now)
                    {
                        error!(subscription, %id, error = %e, "dead-letter publish failed");
                    }
                }
                None => {
                    error!(subscription, %id, attempts = entry.attempts, "delivery attempts exhausted, message dropped");
                }
            }
        } else {
            let eligible_at = if backoff {
                now.saturating_add(redelivery_backoff(entry.attempts))
            } else {
                now
            };
            entry.state = EntryState::Pending { eligible_at };
        }
    }

    /// Earliest time at which the subscription needs attention: a pending
    /// message becoming eligible or an in-flight deadline passing.
    pub fn next_wakeup(&self, subscription: &str) -> Option<Timestamp> {
        let st = self.state.lock().unwrap();
        st.subs
            .get(subscription)?
            .entries
            .values()
            .map(|e| match e.state {
                EntryState::Pending { eligible_at } => eligible_at,
                EntryState::InFlight { deadline } => deadline,
            })
            .min()
    }

    pub fn stats(&self, subscription: &str) -> Result<SubscriptionStats, PubSubError> {
        let st = self.state.lock().unwrap();
        let sub = st
            .subs
            .get(subscription)
            .ok_or_else(|| PubSubError::UnknownSubscription(subscription.to_string()))?;
        let in_flight = sub
            .entries
            .values()
            .filter(|e| matches!(e.state, EntryState::InFlight { .. }))
            .count() as u64;
        Ok(SubscriptionStats {
            published: sub.published,
            pending: sub.entries.len() as u64 - in_flight,
            in_flight,
            acked: sub.acked,
            dead_lettered: sub.dead_lettered,
            deliveries: sub.deliveries,
        })
    }

    /// Ids currently pending or in flight on a subscription.
    pub fn outstanding(&self, subscription: &str) -> HashSet<MessageId> {
        let st = self.state.lock().unwrap();
        st.subs
            .get(subscription)
            .map(|s| s.entries.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Block until something changes on the broker or `timeout` elapses.
    pub fn wait_for_change(&self, timeout: Duration) {
        let st = self.state.lock().unwrap();
        let _ = self.wake.wait_timeout(st, timeout).unwrap();
    }

    pub fn notify_waiters(&self) {
        self.wake.notify_all();
    }

    fn journal(&self, entry: serde_json::Value) {
        if let Some(file) = &self.journal {
            let mut line = entry.to_string();
            line.push('\n');
            if let Err(e) = file.lock().unwrap().write_all(line.as_bytes()) {
                error!(error = %e, "journal append failed");
            }
        }
    }
}

/// Publishes object-creation events to a topic.
pub struct TopicSink {
    broker: Arc<Broker>,
    topic: String,
}

impl TopicSink {
    pub fn new(broker: Arc<Broker>, topic: &str) -> Self {
        TopicSink {
            broker,
            topic: topic.to_string(),
        }
    }
}

impl NotificationSink for TopicSink {
    fn notify(&self, event: &ObjectEvent) -> Result<(), String> {
        let r = &event.record;
        let attrs = storage_event_attributes(&r.bucket, &r.key, r.created_at);
        let data = serde_json::to_vec(r).map_err(|e| e.to_string())?;
        self.broker
            .publish(&self.topic, attrs, data)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

//! The event-driven workflow: upload → creation event → topic → push
//! subscription → autoscaled conversion instances → DICOM store.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use tracing::info;

use super::{
    fault_plan, secs, BenchConfig, BenchError, Mode, SlideBatch, Stage, Workflow, WorkflowReport,
};
use super::{INGEST_TOPIC, LANDING_BUCKET, PUSH_SUBSCRIPTION};
use crate::autoscaler::{
    Admission, Assignment, Autoscaler, Fleet, InstanceFactory, InstanceId, RequestId,
    ScalingSample, ServiceHandler, TICK,
};
use crate::clock::{Clock, Timestamp};
use crate::conversion::{check_ack_deadline, slide_id_for_key, ConversionService};
use crate::dicom::make_uids;
use crate::pubsub::{
    Broker, Delivery, DeliveryLoop, FaultInjectingEndpoint, PushEndpoint, SubscriptionConfig,
    SubscriptionStats, TopicSink, DEFAULT_DEAD_LETTER_TOPIC,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EventStats {
    pub series: Vec<ScalingSample>,
    pub metered_cost: f64,
    /// Sum of instance lifetimes, in seconds.
    pub instance_seconds: f64,
    pub instances_created: usize,
    pub peak_active: usize,
    pub subscription: SubscriptionStats,
    pub injected_faults: usize,
    /// Seconds from the first upload until the fleet was back at its floor.
    pub settled_seconds: f64,
}

fn wire(cfg: &BenchConfig, stage: &Stage) -> Result<Arc<Broker>, BenchError> {
    let broker = Arc::new(Broker::new(stage.clock.clone()));
    broker.create_topic(INGEST_TOPIC)?;
    broker.create_topic(DEFAULT_DEAD_LETTER_TOPIC)?;
    let mut sub = SubscriptionConfig::new(PUSH_SUBSCRIPTION, INGEST_TOPIC, "inproc://conversion");
    sub.ack_deadline = cfg.ack_deadline;
    sub.max_delivery_attempts = cfg.max_delivery_attempts;
    check_ack_deadline(&sub, &cfg.service_config()).map_err(BenchError::Config)?;
    broker.create_subscription(sub)?;
    stage
        .objects
        .set_notification_sink(Arc::new(TopicSink::new(broker.clone(), INGEST_TOPIC)));
    Ok(broker)
}

fn with_faults(
    cfg: &BenchConfig,
    batch: &SlideBatch,
    inner: Arc<dyn PushEndpoint>,
) -> (Arc<dyn PushEndpoint>, Option<Arc<FaultInjectingEndpoint>>) {
    if cfg.fault_fraction > 0.0 {
        let faulty = fault_plan(&batch.keys, cfg.fault_fraction, cfg.seed);
        let ep = Arc::new(FaultInjectingEndpoint::new(inner, faulty));
        (ep.clone(), Some(ep))
    } else {
        (inner, None)
    }
}

/// Upload the batch as a burst and run until the subscription is drained and
/// the fleet is back at its floor.
pub fn run_event_driven(
    cfg: &BenchConfig,
    batch: &SlideBatch,
    workdir: &Path,
) -> Result<WorkflowReport, BenchError> {
    cfg.validate()?;
    let stage = Stage::new(cfg, workdir)?;
    let broker = wire(cfg, &stage)?;
    let start = stage.clock.now();
    let (uploaded, stats) = match cfg.mode {
        Mode::SimWork => simulate(cfg, &stage, batch, broker)?,
        Mode::Real => run_threaded(cfg, &stage, batch, broker)?,
    };

    let mut completions = Vec::new();
    let mut per_image = Vec::new();
    for key in &batch.keys {
        if let Some(committed) = first_commit(cfg, &stage, key)? {
            completions.push(secs(committed.since(start)));
            per_image.push(secs(committed.since(uploaded[key])));
        }
    }
    let failures = batch.keys.len() - completions.len();
    let dead = stats.subscription.dead_lettered;
    info!(
        total = completions.iter().copied().fold(0.0, f64::max),
        cost = stats.metered_cost,
        "event-driven run finished"
    );
    let report = stage.finish(
        cfg,
        Workflow::EventDriven,
        completions,
        per_image,
        failures,
        Some(stats),
    )?;
    if dead > 0 {
        return Err(BenchError::DeadLettered {
            dead_lettered: dead,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// When a slide's instances first became visible in the store.
fn first_commit(
    cfg: &BenchConfig,
    stage: &Stage,
    key: &str,
) -> Result<Option<Timestamp>, BenchError> {
    let study = make_uids(slide_id_for_key(key), 0, &cfg.uid_root)
        .map_err(|e| BenchError::Config(e.to_string()))?
        .study;
    Ok(stage
        .dicom
        .query_series(&study)?
        .iter()
        .map(|e| e.ingested_at)
        .min())
}

fn upload(stage: &Stage, batch: &SlideBatch) -> Result<HashMap<String, Timestamp>, BenchError> {
    let mut uploaded = HashMap::new();
    for key in &batch.keys {
        let bytes = batch.read(key)?;
        let record = stage.objects.put_object(LANDING_BUCKET, key, &bytes)?;
        uploaded.insert(key.clone(), record.created_at);
    }
    Ok(uploaded)
}

type Running = BinaryHeap<Reverse<(Timestamp, u64, InstanceId, RequestId)>>;

/// Discrete-event run on the virtual clock. Each request occupies its
/// instance for exactly `cfg.work_cost`; the conversion itself runs at the
/// instant the work completes, so the commit lands at completion time.
fn simulate(
    cfg: &BenchConfig,
    stage: &Stage,
    batch: &SlideBatch,
    broker: Arc<Broker>,
) -> Result<(HashMap<String, Timestamp>, EventStats), BenchError> {
    let clock = stage
        .virtual_clock
        .clone()
        .expect("simwork has a virtual clock");
    let start = clock.now();
    let service = Arc::new(stage.service(cfg));
    let inner: Arc<dyn PushEndpoint> =
        Arc::new(move |body: &[u8]| service.handle_push(body).status);
    let (endpoint, faults) = with_faults(cfg, batch, inner);

    let mut fleet = Fleet::new(cfg.scaler.clone(), start)?;
    let mut deliveries: HashMap<RequestId, Delivery> = HashMap::new();
    let mut running = Running::new();
    let mut seq = 0u64;
    let mut start_work = |running: &mut Running, a: Assignment, now: Timestamp| {
        seq += 1;
        running.push(Reverse((
            now.saturating_add(cfg.work_cost),
            seq,
            a.instance,
            a.request,
        )));
    };
    let mut samples = Vec::new();
    let mut next_tick = start;
    let limit = start.saturating_add(Duration::from_secs(30 * 86_400));

    let uploaded = upload(stage, batch)?;
    let mut now = start;
    let settled_at = loop {
        clock.set(now);

        while let Some(&Reverse((t, _, instance, request))) = running.peek() {
            if t > now {
                break;
            }
            running.pop();
            let d = deliveries
                .remove(&request)
                .expect("running request has a delivery");
            let outcome = endpoint
                .push(&d.envelope().to_json(), d.deadline.since(now))
                .outcome();
            if let Err(e) = broker.report(&d.subscription, d.message.id, d.attempt, outcome) {
                tracing::debug!(error = %e, "late response");
            }
            if let Some(next) = fleet.complete(instance, now) {
                start_work(&mut running, next, now);
            }
        }
        for a in fleet.poll_ready(now) {
            start_work(&mut running, a, now);
        }
        for d in broker.lease_due(PUSH_SUBSCRIPTION)? {
            match fleet.submit(now)? {
                Admission::Assigned(a) => {
                    deliveries.insert(a.request, d);
                    start_work(&mut running, a, now);
                }
                Admission::Queued { request, .. } => {
                    deliveries.insert(request, d);
                }
            }
        }
        if now == next_tick {
            fleet.scale_down_tick(now);
            samples.push(fleet.sample(now));
            next_tick = now.saturating_add(TICK);
            if broker.stats(PUSH_SUBSCRIPTION)?.is_quiescent()
                && running.is_empty()
                && fleet.is_settled()
            {
                break now;
            }
        }

        now = [
            running.peek().map(|r| r.0 .0),
            fleet.next_ready(),
            broker.next_wakeup(PUSH_SUBSCRIPTION),
            Some(next_tick),
        ]
        .into_iter()
        .flatten()
        .min()
        .expect("a tick is always pending");
        if now > limit {
            return Err(BenchError::Stalled(limit.since(start)));
        }
    };

    let stats = EventStats {
        peak_active: samples
            .iter()
            .map(|s| s.active_instances)
            .max()
            .unwrap_or(0),
        series: samples,
        metered_cost: fleet.metered_cost(settled_at),
        instance_seconds: secs(fleet.instance_time(settled_at)),
        instances_created: fleet.instances().len(),
        subscription: broker.stats(PUSH_SUBSCRIPTION)?,
        injected_faults: faults.map_or(0, |f| f.injected()),
        settled_seconds: secs(settled_at.since(start)),
    };
    Ok((uploaded, stats))
}

/// Wall-clock run: broker delivery threads push into the threaded
/// autoscaler, whose instances each host their own conversion service.
fn run_threaded(
    cfg: &BenchConfig,
    stage: &Stage,
    batch: &SlideBatch,
    broker: Arc<Broker>,
) -> Result<(HashMap<String, Timestamp>, EventStats), BenchError> {
    let factory: Arc<InstanceFactory> = {
        let objects = stage.objects.clone();
        let sink = stage.dicom.clone();
        let clock = stage.clock.clone();
        let service_cfg = cfg.service_config();
        Arc::new(move |_id: InstanceId| {
            let svc = ConversionService::new(
                objects.clone(),
                sink.clone(),
                clock.clone(),
                service_cfg.clone(),
            );
            Arc::new(move |body: &[u8]| svc.handle_push(body)) as Arc<dyn ServiceHandler>
        })
    };
    let scaler = Arc::new(Autoscaler::start(
        cfg.scaler.clone(),
        stage.clock.clone(),
        factory,
    )?);
    let (endpoint, faults) = with_faults(cfg, batch, scaler.clone());
    let delivery = DeliveryLoop::spawn(broker.clone(), PUSH_SUBSCRIPTION, endpoint);

    let start = stage.clock.now();
    let wall = Instant::now();
    let uploaded = upload(stage, batch)?;
    loop {
        let stats = broker.stats(PUSH_SUBSCRIPTION)?;
        if stats.is_quiescent() && scaler.fleet_snapshot().is_settled() {
            break;
        }
        if wall.elapsed() > cfg.real_time_limit {
            delivery.stop();
            scaler.shutdown();
            return Err(BenchError::Stalled(cfg.real_time_limit));
        }
        thread::sleep(Duration::from_millis(20));
    }
    let settled = stage.clock.now();
    delivery.stop();
    scaler.shutdown();

    let fleet = scaler.fleet_snapshot();
    let series = scaler.metrics_series();
    let stats = EventStats {
        peak_active: series.iter().map(|s| s.active_instances).max().unwrap_or(0),
        series,
        metered_cost: fleet.metered_cost(settled),
        instance_seconds: secs(fleet.instance_time(settled)),
        instances_created: fleet.instances().len(),
        subscription: broker.stats(PUSH_SUBSCRIPTION)?,
        injected_faults: faults.map_or(0, |f| f.injected()),
        settled_seconds: secs(settled.since(start)),
    };
    Ok((uploaded, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(batch: usize) -> BenchConfig {
        BenchConfig {
            batch,
            width: 300,
            height: 300,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn single_slide_pays_one_cold_start() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(1);
        let batch = SlideBatch::generate(&c, &dir.path().join("slides")).unwrap();
        let r = run_event_driven(&c, &batch, &dir.path().join("event")).unwrap();
        assert_eq!(r.total_seconds, 12.0);
        let ev = r.event.unwrap();
        // Created at 0, idle from 12, retired at the first tick 60 s later.
        assert_eq!(ev.instance_seconds, 72.0);
        assert_eq!(ev.series.last().unwrap().active_instances, 0);
        assert_eq!(ev.subscription.acked, 1);
    }

    #[test]
    fn short_ack_deadline_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = BenchConfig {
            ack_deadline: Duration::from_secs(60),
            ..cfg(1)
        };
        let batch = SlideBatch::generate(&c, &dir.path().join("slides")).unwrap();
        assert!(matches!(
            run_event_driven(&c, &batch, &dir.path().join("event")),
            Err(BenchError::Config(_))
        ));
    }
}

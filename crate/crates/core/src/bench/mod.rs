//! Benchmark harness: the same slide batch through a serial loop, a fixed
//! worker pool and the event-driven pipeline, with cumulative timings at
//! fixed checkpoints.
//!
//! In SIMWORK mode every conversion still runs for real, but it is charged a
//! fixed virtual cost on a virtual clock, so timings are exact and
//! reproducible. REAL mode measures wall time.

mod event;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;
use tracing::info;

use crate::autoscaler::{ScalerConfig, ScalerError, ScalingSample};
use crate::clock::{Clock, VirtualClock, WallClock, VIRTUAL_EPOCH};
use crate::conversion::{ConversionService, ServiceConfig};
use crate::dicom::DEFAULT_UID_ROOT;
use crate::dicom_store::{DicomStore, DicomStoreError};
use crate::object_store::{BucketConfig, ContentDigest, ObjectStore, StoreError};
use crate::pubsub::PubSubError;
use crate::wsi::{generate_base_only, generate_slide, SpyrError};

pub use event::{run_event_driven, EventStats};
pub use report::{emit_report, render_table, timings_csv, TIMINGS_HEADER};

pub const LANDING_BUCKET: &str = "landing";
pub const INGEST_TOPIC: &str = "wsi-ingest";
pub const PUSH_SUBSCRIPTION: &str = "wsi-dicom-push";
pub const CHECKPOINTS: [usize; 4] = [1, 10, 25, 50];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("slide generation failed: {0}")]
    Generate(#[from] SpyrError),
    #[error("object store: {0}")]
    Objects(#[from] StoreError),
    #[error("DICOM store: {0}")]
    Dicom(#[from] DicomStoreError),
    #[error("broker: {0}")]
    Broker(#[from] PubSubError),
    #[error("autoscaler: {0}")]
    Scaler(#[from] ScalerError),
    #[error("{dead_lettered} message(s) dead-lettered")]
    DeadLettered {
        dead_lettered: u64,
        report: Box<WorkflowReport>,
    },
    #[error("run did not finish within {0:?}")]
    Stalled(Duration),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Workflow {
    Serial,
    Parallel,
    EventDriven,
}

impl Workflow {
    pub const ALL: [Workflow; 3] = [Workflow::Serial, Workflow::Parallel, Workflow::EventDriven];

    pub fn name(self) -> &'static str {
        match self {
            Workflow::Serial => "SERIAL",
            Workflow::Parallel => "PARALLEL",
            Workflow::EventDriven => "EVENT_DRIVEN",
        }
    }
}

impl fmt::Display for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workflow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(Workflow::Serial),
            "parallel" => Ok(Workflow::Parallel),
            "event" | "event_driven" | "event-driven" => Ok(Workflow::EventDriven),
            other => Err(format!(
                "unknown workflow {other:?} (serial, parallel, event)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Real,
    SimWork,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(Mode::Real),
            "simwork" => Ok(Mode::SimWork),
            other => Err(format!("unknown mode {other:?} (real, simwork)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Real => "real",
            Mode::SimWork => "simwork",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch: usize,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub seed: u64,
    /// Write slides as base level only, leaving pyramid construction to the
    /// converter.
    pub base_only: bool,
    pub mode: Mode,
    /// Virtual cost of one conversion in SIMWORK mode.
    pub work_cost: Duration,
    pub workers: usize,
    pub scaler: ScalerConfig,
    pub uid_root: String,
    pub ack_deadline: Duration,
    pub max_delivery_attempts: u32,
    /// Share of slides whose first delivery is answered with a 500 after the
    /// conversion has run.
    pub fault_fraction: f64,
    /// Give up on a REAL event-driven run after this long.
    pub real_time_limit: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 50,
            width: 4096,
            height: 4096,
            tile_size: 256,
            seed: 1,
            base_only: true,
            mode: Mode::SimWork,
            work_cost: Duration::from_secs(10),
            workers: 4,
            scaler: ScalerConfig::default(),
            uid_root: DEFAULT_UID_ROOT.to_string(),
            ack_deadline: Duration::from_secs(660),
            max_delivery_attempts: crate::pubsub::DEFAULT_MAX_DELIVERY_ATTEMPTS,
            fault_fraction: 0.0,
            real_time_limit: Duration::from_secs(3600),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.fault_fraction) {
            return bad("fault fraction must be within [0, 1]");
        }
        self.scaler.validate()?;
        Ok(())
    }

    pub fn service_config(&self) -> ServiceConfig {
        ServiceConfig {
            uid_root: self.uid_root.clone(),
            ..ServiceConfig::default()
        }
    }

    fn snapshot(&self, workflow: Workflow) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("mode", self.mode.to_string());
        put("batch", self.batch.to_string());
        put("slide", format!("{}x{}", self.width, self.height));
        put("tile_size", self.tile_size.to_string());
        if self.mode == Mode::SimWork {
            put(
                "work_cost",
                humantime::format_duration(self.work_cost).to_string(),
            );
        }
        match workflow {
            Workflow::Serial => {}
            Workflow::Parallel => put("workers", self.workers.to_string()),
            Workflow::EventDriven => {
                put("max_instances", self.scaler.max_instances.to_string());
                put("min_instances", self.scaler.min_instances.to_string());
                put(
                    "cold_start",
                    humantime::format_duration(self.scaler.cold_start).to_string(),
                );
                put(
                    "idle_timeout",
                    humantime::format_duration(self.scaler.idle_timeout).to_string(),
                );
                put("fault_fraction", self.fault_fraction.to_string());
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowReport {
    pub workflow: Workflow,
    /// (images processed, elapsed seconds), increasing in both.
    pub checkpoints: Vec<(usize, f64)>,
    pub total_seconds: f64,
    pub per_image_seconds: Vec<f64>,
    pub failures: usize,
    pub config: BTreeMap<String, String>,
    pub slides_committed: usize,
    pub instances_committed: usize,
    pub fingerprint: Vec<(PathBuf, ContentDigest, u64)>,
    pub event: Option<EventStats>,
}

impl WorkflowReport {
    pub fn series(&self) -> &[ScalingSample] {
        self.event.as_ref().map_or(&[], |e| e.series.as_slice())
    }
}

/// Checkpoint counts for a batch: the standard set clipped to the batch,
/// plus the batch itself.
pub fn checkpoint_counts(batch: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = CHECKPOINTS
        .iter()
        .copied()
        .filter(|&c| c <= batch)
        .chain(std::iter::once(batch))
        .collect();
    set.into_iter().collect()
}

fn checkpoints_from(completions: &[f64], batch: usize) -> Vec<(usize, f64)> {
    let mut sorted = completions.to_vec();
    sorted.sort_by(f64::total_cmp);
    checkpoint_counts(batch)
        .into_iter()
        .filter(|&k| k <= sorted.len())
        .map(|k| (k, sorted[k - 1]))
        .collect()
}

pub fn slide_key(index: usize) -> String {
    format!("slide-{:03}.spyr", index + 1)
}

/// Generated slides on disk, reused by every workflow.
#[derive(Debug, Clone)]
pub struct SlideBatch {
    pub dir: PathBuf,
    pub keys: Vec<String>,
}

impl SlideBatch {
    pub fn generate(cfg: &BenchConfig, dir: &Path) -> Result<Self, BenchError> {
        fs::create_dir_all(dir)?;
        let keys: Vec<String> = (0..cfg.batch).map(slide_key).collect();
        keys.par_iter()
            .enumerate()
            .try_for_each(|(i, key)| -> Result<(), BenchError> {
                let path = dir.join(key);
                let slide_id = crate::conversion::slide_id_for_key(key);
                let seed = cfg.seed.wrapping_add(i as u64);
                let bytes = if cfg.base_only {
                    generate_base_only(slide_id, cfg.width, cfg.height, cfg.tile_size, seed)?
                } else {
                    generate_slide(slide_id, cfg.width, cfg.height, cfg.tile_size, seed)?
                };
                fs::write(path, bytes)?;
                Ok(())
            })?;
        Ok(SlideBatch {
            dir: dir.to_path_buf(),
            keys,
        })
    }

    pub fn read(&self, key: &str) -> io::Result<Vec<u8>> {
        fs::read(self.dir.join(key))
    }
}

/// Keys whose first delivery will be failed on purpose.
pub fn fault_plan(keys: &[String], fraction: f64, seed: u64) -> HashSet<String> {
    let n = (keys.len() as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.choose_multiple(&mut rng, n).cloned().collect()
}

/// Per-workflow scratch area under the output directory.
pub(crate) struct Stage {
    pub clock: Arc<dyn Clock>,
    pub virtual_clock: Option<Arc<VirtualClock>>,
    pub objects: Arc<ObjectStore>,
    pub dicom: Arc<DicomStore>,
}

impl Stage {
    pub(crate) fn new(cfg: &BenchConfig, root: &Path) -> Result<Self, BenchError> {
        if root.exists() {
            fs::remove_dir_all(root)?;
        }
        let (clock, virtual_clock): (Arc<dyn Clock>, _) = match cfg.mode {
            Mode::SimWork => {
                let v = Arc::new(VirtualClock::new(VIRTUAL_EPOCH));
                (v.clone(), Some(v))
            }
            Mode::Real => (Arc::new(WallClock), None),
        };
        let objects = Arc::new(ObjectStore::open(root.join("objects"), clock.clone())?);
        objects.create_bucket(LANDING_BUCKET, BucketConfig::default())?;
        let dicom = Arc::new(DicomStore::open(root.join("dicom"), clock.clone())?);
        Ok(Stage {
            clock,
            virtual_clock,
            objects,
            dicom,
        })
    }

    pub(crate) fn service(&self, cfg: &BenchConfig) -> ConversionService {
        ConversionService::new(
            self.objects.clone(),
            self.dicom.clone(),
            self.clock.clone(),
            cfg.service_config(),
        )
    }

    pub(crate) fn finish(
        &self,
        cfg: &BenchConfig,
        workflow: Workflow,
        completions: Vec<f64>,
        per_image_seconds: Vec<f64>,
        failures: usize,
        event: Option<EventStats>,
    ) -> Result<WorkflowReport, BenchError> {
        let fingerprint = self.dicom.fingerprint()?;
        let checkpoints = checkpoints_from(&completions, cfg.batch);
        let total_seconds = completions.iter().copied().fold(0.0, f64::max);
        Ok(WorkflowReport {
            workflow,
            checkpoints,
            total_seconds,
            per_image_seconds,
            failures,
            config: cfg.snapshot(workflow),
            slides_committed: self.dicom.list_studies()?.len(),
            instances_committed: fingerprint.len(),
            fingerprint,
            event,
        })
    }
}

fn upload_all(stage: &Stage, batch: &SlideBatch) -> Result<(), BenchError> {
    for key in &batch.keys {
        stage
            .objects
            .put_object(LANDING_BUCKET, key, &batch.read(key)?)?;
    }
    Ok(())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Convert the batch one slide at a time in submission order.
pub fn run_serial(
    cfg: &BenchConfig,
    batch: &SlideBatch,
    workdir: &Path,
) -> Result<WorkflowReport, BenchError> {
    cfg.validate()?;
    let stage = Stage::new(cfg, workdir)?;
    upload_all(&stage, batch)?;
    let service = stage.service(cfg);
    let mut completions = Vec::with_capacity(batch.keys.len());
    let mut per_image = Vec::with_capacity(batch.keys.len());
    let mut failures = 0;
    let start = Instant::now();
    for (i, key) in batch.keys.iter().enumerate() {
        let t0 = Instant::now();
        if let Some(v) = &stage.virtual_clock {
            v.set(VIRTUAL_EPOCH.saturating_add(cfg.work_cost * (i as u32 + 1)));
        }
        if let Err(e) = service.process(&format!("serial-{}", i + 1), LANDING_BUCKET, key) {
            tracing::warn!(key, error = %e, "conversion failed");
            failures += 1;
        }
        match cfg.mode {
            Mode::SimWork => {
                completions.push(secs(cfg.work_cost) * (i + 1) as f64);
                per_image.push(secs(cfg.work_cost));
            }
            Mode::Real => {
                completions.push(secs(start.elapsed()));
                per_image.push(secs(t0.elapsed()));
            }
        }
    }
    info!(
        total = completions.last().copied().unwrap_or(0.0),
        "serial workflow finished"
    );
    stage.finish(
        cfg,
        Workflow::Serial,
        completions,
        per_image,
        failures,
        None,
    )
}

/// Virtual completion time of each job on a pool of `workers` taking jobs in
/// submission order.
fn pool_schedule(jobs: usize, workers: usize, cost: Duration) -> Vec<Duration> {
    let mut free_at = vec![Duration::ZERO; workers];
    (0..jobs)
        .map(|_| {
            let (w, start) = free_at
                .iter()
                .copied()
                .enumerate()
                .min_by_key(|&(i, t)| (t, i))
                .expect("workers >= 1");
            free_at[w] = start + cost;
            free_at[w]
        })
        .collect()
}

/// Convert the batch on a fixed pool of `cfg.workers` workers.
pub fn run_parallel(
    cfg: &BenchConfig,
    batch: &SlideBatch,
    workdir: &Path,
) -> Result<WorkflowReport, BenchError> {
    cfg.validate()?;
    let stage = Stage::new(cfg, workdir)?;
    upload_all(&stage, batch)?;
    let service = stage.service(cfg);
    let n = batch.keys.len();

    let (completions, per_image, failures) = match cfg.mode {
        Mode::SimWork => {
            let done = pool_schedule(n, cfg.workers, cfg.work_cost);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (done[i], i));
            let mut failures = 0;
            let v = stage
                .virtual_clock
                .as_ref()
                .expect("simwork has a virtual clock");
            for i in order {
                v.set(VIRTUAL_EPOCH.saturating_add(done[i]));
                if service
                    .process(
                        &format!("parallel-{}", i + 1),
                        LANDING_BUCKET,
                        &batch.keys[i],
                    )
                    .is_err()
                {
                    failures += 1;
                }
            }
            (
                done.iter().map(|d| secs(*d)).collect(),
                vec![secs(cfg.work_cost); n],
                failures,
            )
        }
        Mode::Real => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .thread_name(|i| format!("bench-worker-{i}"))
                .build()
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let start = Instant::now();
            let results: Vec<(f64, f64, bool)> = pool.install(|| {
                batch
                    .keys
                    .par_iter()
                    .with_max_len(1)
                    .enumerate()
                    .map(|(i, key)| {
                        let t0 = Instant::now();
                        let ok = service
                            .process(&format!("parallel-{}", i + 1), LANDING_BUCKET, key)
                            .is_ok();
                        (secs(start.elapsed()), secs(t0.elapsed()), ok)
                    })
                    .collect()
            });
            (
                results.iter().map(|r| r.0).collect(),
                results.iter().map(|r| r.1).collect(),
                results.iter().filter(|r| !r.2).count(),
            )
        }
    };
    stage.finish(
        cfg,
        Workflow::Parallel,
        completions,
        per_image,
        failures,
        None,
    )
}

pub fn run_workflow(
    workflow: Workflow,
    cfg: &BenchConfig,
    batch: &SlideBatch,
    workdir: &Path,
) -> Result<WorkflowReport, BenchError> {
    match workflow {
        Workflow::Serial => run_serial(cfg, batch, workdir),
        Workflow::Parallel => run_parallel(cfg, batch, workdir),
        Workflow::EventDriven => run_event_driven(cfg, batch, workdir),
    }
}

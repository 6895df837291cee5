//! The push-subscriber conversion service: receive an envelope, fetch the
//! slide, build DICOM instances for every level and commit them to the
//! DICOM store. Replies 200 only after the commit is durable.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};

use crate::clock::{rfc3339, Clock, Timestamp};
use crate::dicom::{
    encode_level, make_uids, DicomError, DEFAULT_UID_ROOT, IMPLEMENTATION_VERSION_NAME,
};
use crate::dicom_store::{CommitSummary, DicomStore, DicomStoreError, StagingToken};
use crate::http::{self, Reply, Request};
use crate::object_store::{ObjectStore, StoreError};
use crate::pubsub::{PushEnvelope, SubscriptionConfig, ATTR_BUCKET_ID, ATTR_OBJECT_ID};
use crate::wsi::{build_pyramid, read_spyr, Level, SpyrError, WsiPyramid};

/// Per-conversion budget. The push subscription's ack deadline must be longer.
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Received,
    Fetching,
    Converting,
    Storing,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversionJob {
    pub message_id: String,
    pub bucket: String,
    pub key: String,
    #[serde(with = "rfc3339")]
    pub received_at: Timestamp,
    pub state: JobState,
    pub attempt: u32,
}

#[derive(Debug, Error)]
pub enum ConversionError {
    #[error("malformed push envelope: {0}")]
    MalformedEnvelope(String),
    #[error("fetch failed: {0}")]
    Fetch(#[from] StoreError),
    #[error("source is not a valid slide: {0}")]
    Decode(#[from] SpyrError),
    #[error("encoding failed: {0}")]
    Encode(#[from] DicomError),
    #[error("store failed: {0}")]
    Store(String),
    #[error("conversion exceeded {0:?}")]
    Timeout(Duration),
    #[error("service is shutting down")]
    Draining,
}

impl ConversionError {
    pub fn code(&self) -> &'static str {
        match self {
            ConversionError::MalformedEnvelope(_) => "malformed_envelope",
            ConversionError::Fetch(StoreError::NotFound { .. }) => "object_not_found",
            ConversionError::Fetch(_) => "fetch_failed",
            ConversionError::Decode(_) => "decode_failed",
            ConversionError::Encode(_) => "encode_failed",
            ConversionError::Store(_) => "store_failed",
            ConversionError::Timeout(_) => "timeout",
            ConversionError::Draining => "shutting_down",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ConversionError::MalformedEnvelope(_) => 400,
            ConversionError::Draining => 503,
            _ => 500,
        }
    }
}

/// Where converted instances go: the store in-process or over HTTP.
pub trait DicomSink: Send + Sync {
    fn begin(&self) -> Result<StagingToken, String>;
    fn store(&self, token: &StagingToken, bytes: &[u8]) -> Result<String, String>;
    fn commit(&self, token: &StagingToken) -> Result<CommitSummary, String>;
    fn discard(&self, token: &StagingToken);
}

impl DicomSink for DicomStore {
    fn begin(&self) -> Result<StagingToken, String> {
        DicomStore::begin(self).map_err(|e| e.to_string())
    }

    fn store(&self, token: &StagingToken, bytes: &[u8]) -> Result<String, String> {
        self.store_instance(bytes, token).map_err(|e| e.to_string())
    }

    fn commit(&self, token: &StagingToken) -> Result<CommitSummary, String> {
        DicomStore::commit(self, token).map_err(|e| e.to_string())
    }

    fn discard(&self, token: &StagingToken) {
        if let Err(e) = DicomStore::discard(self, token) {
            if !matches!(e, DicomStoreError::UnknownToken(_)) {
                warn!(token = %token, error = %e, "discard failed");
            }
        }
    }
}

/// Talks to a store served by [`crate::dicom_store::http_handler`].
pub struct HttpDicomSink {
    base_url: String,
    timeout: Duration,
}

impl HttpDicomSink {
    pub fn new(base_url: &str) -> Self {
        HttpDicomSink {
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(60),
        }
    }

    fn post(&self, path: &str, body: &[u8]) -> Result<serde_json::Value, String> {
        let reply = http::call(
            "POST",
            &format!("{}{}", self.base_url, path),
            body,
            self.timeout,
        )?;
        let value: serde_json::Value =
            serde_json::from_slice(&reply.body).map_err(|e| e.to_string())?;
        if reply.is_success() {
            Ok(value)
        } else {
            Err(format!("store replied {}: {}", reply.status, value))
        }
    }
}

impl DicomSink for HttpDicomSink {
    fn begin(&self) -> Result<StagingToken, String> {
        let v = self.post("/staging", b"")?;
        v["token"]
            .as_str()
            .map(|t| StagingToken(t.to_string()))
            .ok_or_else(|| format!("no token in {v}"))
    }

    fn store(&self, token: &StagingToken, bytes: &[u8]) -> Result<String, String> {
        let v = self.post(&format!("/instances?token={token}"), bytes)?;
        v["sop_uid"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("no sop_uid in {v}"))
    }

    fn commit(&self, token: &StagingToken) -> Result<CommitSummary, String> {
        let v = self.post(&format!("/commits/{token}"), b"")?;
        Ok(CommitSummary {
            added: v["added"].as_u64().unwrap_or(0) as usize,
            unchanged: v["unchanged"].as_u64().unwrap_or(0) as usize,
        })
    }

    fn discard(&self, token: &StagingToken) {
        if let Err(e) = self.post(&format!("/discards/{token}"), b"") {
            warn!(token = %token, error = %e, "discard failed");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub uid_root: String,
    /// Re-tile the base level to this size when the source differs.
    pub tile_size: Option<u32>,
    pub request_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            uid_root: DEFAULT_UID_ROOT.to_string(),
            tile_size: None,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
        }
    }
}

/// The ack deadline has to outlast a full conversion, or the broker would
/// redeliver work that is still running.
pub fn check_ack_deadline(sub: &SubscriptionConfig, config: &ServiceConfig) -> Result<(), String> {
    if sub.ack_deadline <= config.request_timeout {
        return Err(format!(
            "ack deadline {:?} of {} must exceed the request timeout {:?}",
            sub.ack_deadline, sub.name, config.request_timeout
        ));
    }
    Ok(())
}

/// Slide id derived from an object key: `batch/slide-007.spyr` → `slide-007`.
pub fn slide_id_for_key(key: &str) -> &str {
    let name = key.rsplit('/').next().unwrap_or(key);
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

/// Encoded instances for every pyramid level, in level order.
pub fn convert_slide(
    source: &[u8],
    slide_id: &str,
    config: &ServiceConfig,
) -> Result<Vec<Vec<u8>>, ConversionError> {
    let pyramid = prepare_pyramid(read_spyr(source)?, slide_id, config.tile_size);
    pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(i, level)| {
            let uids = make_uids(slide_id, i as u32, &config.uid_root)?;
            Ok(encode_level(level, &uids, i as u32)?)
        })
        .collect()
}

fn prepare_pyramid(mut p: WsiPyramid, slide_id: &str, tile_size: Option<u32>) -> WsiPyramid {
    match tile_size {
        Some(t) if t != p.tile_size => {
            let base = p.levels.swap_remove(0);
            let retiled = Level::from_raster(base.width, base.height, t, &base.to_raster());
            build_pyramid(slide_id, retiled)
        }
        _ if p.levels.len() == 1 => build_pyramid(slide_id, p.levels.swap_remove(0)),
        _ => {
            p.slide_id = slide_id.to_string();
            p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversionOutcome {
    pub slide_id: String,
    pub study_uid: String,
    pub instances: usize,
    pub added: usize,
}

pub struct ConversionService {
    objects: Arc<ObjectStore>,
    sink: Arc<dyn DicomSink>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
    jobs: Mutex<Vec<ConversionJob>>,
    draining: AtomicBool,
}

impl ConversionService {
    pub fn new(
        objects: Arc<ObjectStore>,
        sink: Arc<dyn DicomSink>,
        clock: Arc<dyn Clock>,
        config: ServiceConfig,
    ) -> Self {
        ConversionService {
            objects,
            sink,
            clock,
            config,
            jobs: Mutex::new(Vec::new()),
            draining: AtomicBool::new(false),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// `POST /push`.
    pub fn handle_push(&self, body: &[u8]) -> Reply {
        match self.process_envelope(body) {
            Ok(out) => Reply::json(200, &out),
            Err(e) => {
                warn!(code = e.code(), error = %e, "push rejected");
                Reply::error(e.status(), e.code(), &e.to_string())
            }
        }
    }

    /// `GET /healthz`.
    pub fn healthz(&self) -> Reply {
        #[derive(Serialize)]
        struct Health {
            status: &'static str,
            version: &'static str,
            implementation: &'static str,
        }
        let draining = self.draining.load(Ordering::SeqCst);
        Reply::json(
            if draining { 503 } else { 200 },
            &Health {
                status: if draining { "draining" } else { "ok" },
                version: env!("CARGO_PKG_VERSION"),
                implementation: IMPLEMENTATION_VERSION_NAME,
            },
        )
    }

    /// Stop accepting new pushes; health checks start failing.
    pub fn drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }

    pub fn route(&self, req: &Request) -> Reply {
        match (req.method.as_str(), req.path.as_str()) {
            ("POST", "/push") => self.handle_push(&req.body),
            ("GET", "/healthz") => self.healthz(),
            _ => Reply::not_found(),
        }
    }

    pub fn jobs(&self) -> Vec<ConversionJob> {
        self.jobs.lock().unwrap().clone()
    }

    fn process_envelope(&self, body: &[u8]) -> Result<ConversionOutcome, ConversionError> {
        if self.draining.load(Ordering::SeqCst) {
            return Err(ConversionError::Draining);
        }
        let env = PushEnvelope::from_json(body)
            .map_err(|e| ConversionError::MalformedEnvelope(e.to_string()))?;
        let msg = env
            .to_message()
            .map_err(|e| ConversionError::MalformedEnvelope(e.to_string()))?;
        let missing =
            |a: &str| ConversionError::MalformedEnvelope(format!("attribute {a} missing"));
        let bucket = env
            .attribute(ATTR_BUCKET_ID)
            .ok_or_else(|| missing(ATTR_BUCKET_ID))?;
        let key = env
            .attribute(ATTR_OBJECT_ID)
            .ok_or_else(|| missing(ATTR_OBJECT_ID))?;
        self.process(&msg.id.to_string(), bucket, key)
    }

    /// Fetch, convert and store one object. Used directly by the serial and
    /// parallel workflows, which have no broker in front of them.
    pub fn process(
        &self,
        message_id: &str,
        bucket: &str,
        key: &str,
    ) -> Result<ConversionOutcome, ConversionError> {
        let started = self.clock.now();
        let job = self.open_job(message_id, bucket, key, started);
        let result = self.run(job, bucket, key, started);
        self.set_state(
            job,
            if result.is_ok() {
                JobState::Done
            } else {
                JobState::Failed
            },
        );
        if let Ok(out) = &result {
            info!(bucket, key, study = %out.study_uid, instances = out.instances, "slide converted");
        }
        result
    }

    fn run(
        &self,
        job: usize,
        bucket: &str,
        key: &str,
        started: Timestamp,
    ) -> Result<ConversionOutcome, ConversionError> {
        let check_budget = || {
            if self.clock.now().since(started) > self.config.request_timeout {
                Err(ConversionError::Timeout(self.config.request_timeout))
            } else {
                Ok(())
            }
        };
        self.set_state(job, JobState::Fetching);
        let (source, _) = self.objects.get_object(bucket, key)?;
        check_budget()?;

        self.set_state(job, JobState::Converting);
        let slide_id = slide_id_for_key(key);
        let instances = convert_slide(&source, slide_id, &self.config)?;
        check_budget()?;

        self.set_state(job, JobState::Storing);
        let token = self.sink.begin().map_err(ConversionError::Store)?;
        let stored = (|| {
            for bytes in &instances {
                self.sink.store(&token, bytes)?;
            }
            check_budget().map_err(|e| e.to_string())?;
            self.sink.commit(&token)
        })();
        let summary = match stored {
            Ok(s) => s,
            Err(e) => {
                self.sink.discard(&token);
                return Err(ConversionError::Store(e));
            }
        };
        Ok(ConversionOutcome {
            slide_id: slide_id.to_string(),
            study_uid: make_uids(slide_id, 0, &self.config.uid_root)?.study,
            instances: instances.len(),
            added: summary.added,
        })
    }

    fn open_job(&self, message_id: &str, bucket: &str, key: &str, now: Timestamp) -> usize {
        let mut jobs = self.jobs.lock().unwrap();
        let attempt = jobs
            .iter()
            .filter(|j| j.message_id == message_id && j.key == key)
            .count() as u32
            + 1;
        jobs.push(ConversionJob {
            message_id: message_id.to_string(),
            bucket: bucket.to_string(),
            key: key.to_string(),
            received_at: now,
            state: JobState::Received,
            attempt,
        });
        jobs.len() - 1
    }

    fn set_state(&self, job: usize, state: JobState) {
        let mut jobs = self.jobs.lock().unwrap();
        let j = &mut jobs[job];
        debug_assert!(j.state != JobState::Done && j.state != JobState::Failed);
        debug_assert!(state > j.state);
        j.state = state;
    }
}

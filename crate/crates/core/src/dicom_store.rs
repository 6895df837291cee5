//! Destination store for converted instances.
//!
//! Instances are validated and staged under a token, then committed per
//! study. Layout:
//!
//! ```text
//! <root>/.staging/<token>/<sop>.dcm      staged bytes
//! <root>/<study>/<series>/<sop>.dcm      committed bytes
//! <root>/<study>/COMMITTED.json          commit marker and manifest
//! ```
//!
//! Queries read only the manifest, which is replaced atomically, so a study
//! is visible either with all of a commit's instances or none of them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::clock::{rfc3339, Clock, Timestamp};
use crate::dicom::{decode_instance, DicomError};
use crate::fsutil;
use crate::http::{Handler, Reply, Request};
use crate::object_store::ContentDigest;

const STAGING_DIR: &str = ".staging";
const MANIFEST: &str = "COMMITTED.json";

#[derive(Debug, Error)]
pub enum DicomStoreError {
    #[error("instance rejected: {0}")]
    ValidationFailed(#[from] DicomError),
    #[error("SOP instance {0} staged twice under one token")]
    DuplicateSop(String),
    #[error("staging token {0} has nothing staged")]
    EmptyToken(String),
    #[error("unknown staging token {0}")]
    UnknownToken(String),
    #[error("SOP instance {0} already committed with different content")]
    ConflictingSop(String),
    #[error("corrupt store metadata {0}: {1}")]
    Corrupt(String, String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StagingToken(pub String);

impl fmt::Display for StagingToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub study_uid: String,
    pub series_uid: String,
    pub sop_uid: String,
    /// Relative to the store root.
    pub path: PathBuf,
    #[serde(with = "rfc3339")]
    pub ingested_at: Timestamp,
    pub byte_size: u64,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StagedEntry {
    study_uid: String,
    series_uid: String,
    sop_uid: String,
    byte_size: u64,
    digest: ContentDigest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommitSummary {
    pub added: usize,
    pub unchanged: usize,
}

impl CommitSummary {
    pub fn total(&self) -> usize {
        self.added + self.unchanged
    }
}

pub struct DicomStore {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    study_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl fmt::Debug for DicomStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DicomStore")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl DicomStore {
    pub fn open(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, DicomStoreError> {
        let root = root.into();
        fs::create_dir_all(root.join(STAGING_DIR))?;
        Ok(DicomStore {
            root,
            clock,
            study_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn begin(&self) -> Result<StagingToken, DicomStoreError> {
        let token = StagingToken(fsutil::unique_name("stage"));
        fs::create_dir_all(self.staging_dir(&token))?;
        Ok(token)
    }

    fn staging_dir(&self, token: &StagingToken) -> PathBuf {
        self.root.join(STAGING_DIR).join(&token.0)
    }

    fn checked_staging_dir(&self, token: &StagingToken) -> Result<PathBuf, DicomStoreError> {
        let valid = !token.0.is_empty()
            && token
                .0
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        let dir = self.staging_dir(token);
        if valid && dir.is_dir() {
            Ok(dir)
        } else {
            Err(DicomStoreError::UnknownToken(token.0.clone()))
        }
    }

    /// Validate and stage one instance. Not visible to queries until commit.
    pub fn store_instance(
        &self,
        bytes: &[u8],
        token: &StagingToken,
    ) -> Result<String, DicomStoreError> {
        let dir = self.checked_staging_dir(token)?;
        let inst = decode_instance(bytes)?;
        let sop = inst.sop_instance_uid;
        let data_path = dir.join(format!("{sop}.dcm"));
        let meta_path = dir.join(format!("{sop}.json"));
        if meta_path.exists() {
            return Err(DicomStoreError::DuplicateSop(sop));
        }
        fs::write(&data_path, bytes)?;
        let staged = StagedEntry {
            study_uid: inst.study_instance_uid,
            series_uid: inst.series_instance_uid,
            sop_uid: sop.clone(),
            byte_size: bytes.len() as u64,
            digest: ContentDigest::of(bytes),
        };
        fs::write(&meta_path, serde_json::to_vec(&staged).expect("serializes"))?;
        debug!(token = %token, sop = %sop, "instance staged");
        Ok(sop)
    }

    /// Drop everything staged under `token`.
    pub fn discard(&self, token: &StagingToken) -> Result<(), DicomStoreError> {
        let dir = self.checked_staging_dir(token)?;
        fs::remove_dir_all(dir)?;
        Ok(())
    }

    /// Make every staged instance queryable at once. Instances already
    /// committed with identical content are left alone.
    pub fn commit(&self, token: &StagingToken) -> Result<CommitSummary, DicomStoreError> {
        let dir = self.checked_staging_dir(token)?;
        let mut by_study: BTreeMap<String, Vec<StagedEntry>> = BTreeMap::new();
        for rel in fsutil::list_files(&dir)? {
            if rel.extension().is_some_and(|e| e == "json") {
                let path = dir.join(&rel);
                let staged: StagedEntry =
                    serde_json::from_slice(&fs::read(&path)?).map_err(|e| {
                        DicomStoreError::Corrupt(path.display().to_string(), e.to_string())
                    })?;
                by_study
                    .entry(staged.study_uid.clone())
                    .or_default()
                    .push(staged);
            }
        }
        if by_study.is_empty() {
            return Err(DicomStoreError::EmptyToken(token.0.clone()));
        }

        let mut summary = CommitSummary::default();
        for (study, staged) in by_study {
            let lock = self.study_lock(&study);
            let _guard = lock.lock().unwrap();
            let mut manifest = self.read_manifest(&study)?;

            // Check every instance before touching anything.
            for s in &staged {
                if let Some(existing) = manifest.get(&s.sop_uid) {
                    if existing.digest != s.digest || existing.byte_size != s.byte_size {
                        return Err(DicomStoreError::ConflictingSop(s.sop_uid.clone()));
                    }
                }
            }

            let now = self.clock.now();
            for s in staged {
                if manifest.contains_key(&s.sop_uid) {
                    summary.unchanged += 1;
                    continue;
                }
                let rel = PathBuf::from(&s.study_uid)
                    .join(&s.series_uid)
                    .join(format!("{}.dcm", s.sop_uid));
                let dest = self.root.join(&rel);
                fs::create_dir_all(dest.parent().expect("has parent"))?;
                fs::rename(dir.join(format!("{}.dcm", s.sop_uid)), &dest)?;
                manifest.insert(
                    s.sop_uid.clone(),
                    StoreEntry {
                        study_uid: s.study_uid,
                        series_uid: s.series_uid,
                        sop_uid: s.sop_uid,
                        path: rel,
                        ingested_at: now,
                        byte_size: s.byte_size,
                        digest: s.digest,
                    },
                );
                summary.added += 1;
            }
            let entries: Vec<&StoreEntry> = manifest.values().collect();
            fsutil::write_atomic(
                &self.root.join(&study).join(MANIFEST),
                &serde_json::to_vec_pretty(&entries).expect("serializes"),
            )?;
            info!(study = %study, added = summary.added, unchanged = summary.unchanged, "study committed");
        }
        let _ = fs::remove_dir_all(&dir);
        Ok(summary)
    }

    fn read_manifest(&self, study: &str) -> Result<BTreeMap<String, StoreEntry>, DicomStoreError> {
        let path = self.root.join(study).join(MANIFEST);
        match fs::read(&path) {
            Ok(bytes) => {
                let entries: Vec<StoreEntry> = serde_json::from_slice(&bytes).map_err(|e| {
                    DicomStoreError::Corrupt(path.display().to_string(), e.to_string())
                })?;
                Ok(entries
                    .into_iter()
                    .map(|e| (e.sop_uid.clone(), e))
                    .collect())
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Committed instances of a study, ordered by series then SOP UID.
    pub fn query_series(&self, study_uid: &str) -> Result<Vec<StoreEntry>, DicomStoreError> {
        if study_uid.contains(['/', '\\']) || study_uid.starts_with('.') {
            return Ok(Vec::new());
        }
        let mut entries: Vec<StoreEntry> = self.read_manifest(study_uid)?.into_values().collect();
        entries.sort_by(|a, b| (&a.series_uid, &a.sop_uid).cmp(&(&b.series_uid, &b.sop_uid)));
        Ok(entries)
    }

    pub fn list_studies(&self) -> Result<Vec<String>, DicomStoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.path().join(MANIFEST).is_file() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn read_instance(&self, entry: &StoreEntry) -> Result<Vec<u8>, DicomStoreError> {
        Ok(fs::read(self.root.join(&entry.path))?)
    }

    /// Every committed instance as (path, digest, size), sorted. Two stores
    /// holding the same files compare equal regardless of ingest times.
    pub fn fingerprint(&self) -> Result<Vec<(PathBuf, ContentDigest, u64)>, DicomStoreError> {
        let mut out = Vec::new();
        for study in self.list_studies()? {
            for e in self.query_series(&study)? {
                out.push((e.path, e.digest, e.byte_size));
            }
        }
        out.sort();
        Ok(out)
    }

    fn study_lock(&self, study: &str) -> Arc<Mutex<()>> {
        self.study_locks
            .lock()
            .unwrap()
            .entry(study.to_string())
            .or_default()
            .clone()
    }
}

impl DicomStoreError {
    fn http_status(&self) -> u16 {
        match self {
            DicomStoreError::ValidationFailed(_) => 422,
            DicomStoreError::DuplicateSop(_) | DicomStoreError::ConflictingSop(_) => 409,
            DicomStoreError::EmptyToken(_) => 400,
            DicomStoreError::UnknownToken(_) => 404,
            DicomStoreError::Corrupt(..) | DicomStoreError::Io(_) => 500,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            DicomStoreError::ValidationFailed(_) => "validation_failed",
            DicomStoreError::DuplicateSop(_) => "duplicate_sop",
            DicomStoreError::ConflictingSop(_) => "conflicting_sop",
            DicomStoreError::EmptyToken(_) => "empty_token",
            DicomStoreError::UnknownToken(_) => "unknown_token",
            DicomStoreError::Corrupt(..) => "corrupt_store",
            DicomStoreError::Io(_) => "io_error",
        }
    }
}

fn reply_for<T: Serialize>(result: Result<T, DicomStoreError>) -> Reply {
    match result {
        Ok(v) => Reply::json(200, &v),
        Err(e) => Reply::error(e.http_status(), e.code(), &e.to_string()),
    }
}

/// HTTP facade for running the store in its own process.
///
/// ```text
/// POST /staging                   -> {"token": ...}
/// POST /instances?token=T         body: Part 10 bytes -> {"sop_uid": ...}
/// POST /instances                 stage and commit a single instance
/// POST /commits/T                 -> {"added": n, "unchanged": m}
/// POST /discards/T
/// GET  /studies/UID               -> [StoreEntry, ...]
/// ```
pub fn http_handler(store: Arc<DicomStore>) -> impl Handler {
    #[derive(Serialize)]
    struct Token {
        token: String,
    }
    #[derive(Serialize)]
    struct Stored {
        sop_uid: String,
    }
    #[derive(Serialize)]
    struct Committed {
        added: usize,
        unchanged: usize,
    }
    let committed = |s: CommitSummary| Committed {
        added: s.added,
        unchanged: s.unchanged,
    };

    move |req: &Request| -> Reply {
        let path = req.path.as_str();
        match req.method.as_str() {
            "POST" if path == "/staging" => reply_for(store.begin().map(|t| Token { token: t.0 })),
            "POST" if path == "/instances" => match req.query_param("token") {
                Some(t) => reply_for(
                    store
                        .store_instance(&req.body, &StagingToken(t.to_string()))
                        .map(|sop_uid| Stored { sop_uid }),
                ),
                None => reply_for((|| {
                    let token = store.begin()?;
                    let staged = store
                        .store_instance(&req.body, &token)
                        .and_then(|_| store.commit(&token));
                    if staged.is_err() {
                        let _ = store.discard(&token);
                    }
                    staged.map(committed)
                })()),
            },
            "POST" if path.starts_with("/commits/") => {
                let token = StagingToken(path["/commits/".len()..].to_string());
                reply_for(store.commit(&token).map(committed))
            }
            "POST" if path.starts_with("/discards/") => {
                let token = StagingToken(path["/discards/".len()..].to_string());
                reply_for(store.discard(&token).map(|_| Token {
                    token: token.0.clone(),
                }))
            }
            "GET" if path.starts_with("/studies/") => {
                reply_for(store.query_series(&path["/studies/".len()..]))
            }
            _ => Reply::not_found(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::dicom::{encode_level, make_uids, DEFAULT_UID_ROOT};
    use crate::wsi::generate_pyramid;

    fn slide_instances(slide: &str, side: u32) -> Vec<Vec<u8>> {
        let p = generate_pyramid(slide, side, side, 256, 1).unwrap();
        p.levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let u = make_uids(slide, i as u32, DEFAULT_UID_ROOT).unwrap();
                encode_level(l, &u, i as u32).unwrap()
            })
            .collect()
    }

    fn store() -> (tempfile::TempDir, DicomStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = DicomStore::open(dir.path(), Arc::new(VirtualClock::default())).unwrap();
        (dir, s)
    }

    fn study_of(slide: &str) -> String {
        make_uids(slide, 0, DEFAULT_UID_ROOT).unwrap().study
    }

    #[test]
    fn staged_is_invisible_until_commit() {
        let (_d, s) = store();
        let token = s.begin().unwrap();
        let instances = slide_instances("a", 1024);
        assert_eq!(instances.len(), 3);
        for bytes in &instances {
            s.store_instance(bytes, &token).unwrap();
        }
        assert!(s.query_series(&study_of("a")).unwrap().is_empty());
        let summary = s.commit(&token).unwrap();
        assert_eq!(
            summary,
            CommitSummary {
                added: 3,
                unchanged: 0
            }
        );
        let entries = s.query_series(&study_of("a")).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            decode_instance(&s.read_instance(e).unwrap()).unwrap();
        }
    }

    #[test]
    fn recommit_identical_is_noop() {
        let (_d, s) = store();
        for _ in 0..2 {
            let token = s.begin().unwrap();
            for bytes in slide_instances("a", 1024) {
                s.store_instance(&bytes, &token).unwrap();
            }
            s.commit(&token).unwrap();
        }
        assert_eq!(s.query_series(&study_of("a")).unwrap().len(), 3);
    }

    #[test]
    fn conflicting_content_is_rejected() {
        let (_d, s) = store();
        let token = s.begin().unwrap();
        let original = slide_instances("a", 300);
        s.store_instance(&original[0], &token).unwrap();
        s.commit(&token).unwrap();

        // Same SOP UID, different pixels.
        let mut other = original[0].clone();
        let n = other.len();
        other[n - 1] ^= 0xff;
        let token = s.begin().unwrap();
        s.store_instance(&other, &token).unwrap();
        assert!(matches!(
            s.commit(&token),
            Err(DicomStoreError::ConflictingSop(_))
        ));
        assert_eq!(
            s.query_series(&study_of("a")).unwrap()[0].digest,
            ContentDigest::of(&original[0])
        );
    }

    #[test]
    fn validation_and_duplicates() {
        let (_d, s) = store();
        let token = s.begin().unwrap();
        let mut bad = slide_instances("a", 100).remove(0);
        bad[128] = b'X';
        assert!(matches!(
            s.store_instance(&bad, &token),
            Err(DicomStoreError::ValidationFailed(
                DicomError::MissingPreamble
            ))
        ));
        let good = slide_instances("a", 100).remove(0);
        s.store_instance(&good, &token).unwrap();
        assert!(matches!(
            s.store_instance(&good, &token),
            Err(DicomStoreError::DuplicateSop(_))
        ));
    }

    #[test]
    fn empty_and_unknown_tokens() {
        let (_d, s) = store();
        let token = s.begin().unwrap();
        assert!(matches!(
            s.commit(&token),
            Err(DicomStoreError::EmptyToken(_))
        ));
        let bogus = StagingToken("../etc".into());
        assert!(matches!(
            s.commit(&bogus),
            Err(DicomStoreError::UnknownToken(_))
        ));
    }

    #[test]
    fn discard_leaves_nothing_visible() {
        let (_d, s) = store();
        let token = s.begin().unwrap();
        for bytes in slide_instances("a", 600) {
            s.store_instance(&bytes, &token).unwrap();
        }
        s.discard(&token).unwrap();
        assert!(s.list_studies().unwrap().is_empty());
        assert!(matches!(
            s.commit(&token),
            Err(DicomStoreError::UnknownToken(_))
        ));
    }

    #[test]
    fn concurrent_commits_of_distinct_slides() {
        let (_d, s) = store();
        let s = Arc::new(s);
        let handles: Vec<_> = (0..6)
            .map(|i| {
                let s = s.clone();
                std::thread::spawn(move || {
                    let slide = format!("slide-{i}");
                    let token = s.begin().unwrap();
                    for bytes in slide_instances(&slide, 512) {
                        s.store_instance(&bytes, &token).unwrap();
                    }
                    s.commit(&token).unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(s.list_studies().unwrap().len(), 6);
        assert_eq!(s.fingerprint().unwrap().len(), 12);
    }

    #[test]
    fn http_facade_with_remote_sink() {
        use crate::conversion::{DicomSink, HttpDicomSink};
        use crate::http::HttpServer;

        let (_d, s) = store();
        let s = Arc::new(s);
        let server =
            HttpServer::start("127.0.0.1:0", 2, Arc::new(http_handler(s.clone()))).unwrap();
        let sink = HttpDicomSink::new(&server.url(""));
        let token = sink.begin().unwrap();
        for bytes in slide_instances("remote", 600) {
            sink.store(&token, &bytes).unwrap();
        }
        let err = sink.store(&token, b"garbage").unwrap_err();
        assert!(err.contains("422"), "{err}");
        assert_eq!(
            sink.commit(&token).unwrap(),
            CommitSummary {
                added: 3,
                unchanged: 0
            }
        );

        let url = server.url(&format!("/studies/{}", study_of("remote")));
        let reply = crate::http::call("GET", &url, b"", std::time::Duration::from_secs(5)).unwrap();
        let entries: Vec<StoreEntry> = serde_json::from_slice(&reply.body).unwrap();
        assert_eq!(entries.len(), 3);

        // Single-shot ingest without a token.
        let one = slide_instances("solo", 100).remove(0);
        let reply = crate::http::call(
            "POST",
            &server.url("/instances"),
            &one,
            std::time::Duration::from_secs(5),
        )
        .unwrap();
        assert_eq!(reply.status, 200);
        assert_eq!(s.query_series(&study_of("solo")).unwrap().len(), 1);
        server.stop();
    }
}

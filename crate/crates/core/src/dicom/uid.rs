use sha2::{Digest, Sha256};

use super::DicomError;

/// Placeholder organisational root. Deployments should configure their own.
pub const DEFAULT_UID_ROOT: &str = "1.2.999.1";
pub const MAX_UID_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UidTriple {
    pub study: String,
    pub series: String,
    pub sop: String,
}

/// Digits and dots, at most 64 characters, no empty components and no
/// leading zeros (a lone `0` is fine).
pub fn is_valid_uid(uid: &str) -> bool {
    !uid.is_empty()
        && uid.len() <= MAX_UID_LEN
        && uid.split('.').all(|c| {
            !c.is_empty()
                && c.bytes().all(|b| b.is_ascii_digit())
                && (c == "0" || !c.starts_with('0'))
        })
}

/// Deterministic UIDs for one pyramid level of a slide. Study and series
/// depend only on the slide; the SOP instance adds the level index.
pub fn make_uids(slide_id: &str, level_index: u32, root: &str) -> Result<UidTriple, DicomError> {
    if !is_valid_uid(root) {
        return Err(DicomError::UidInvalid(root.to_string()));
    }
    let digest = Sha256::digest(slide_id.as_bytes());
    let slide_hash = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    let triple = UidTriple {
        study: format!("{root}.1.{slide_hash}"),
        series: format!("{root}.2.{slide_hash}"),
        sop: format!("{root}.3.{slide_hash}.{level_index}"),
    };
    let longest = triple.sop.len().max(triple.study.len());
    if longest > MAX_UID_LEN {
        return Err(DicomError::RootTooLong {
            root: root.to_string(),
            total: longest,
        });
    }
    Ok(triple)
}

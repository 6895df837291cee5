//! Minimal DICOM Part 10 writer and strict reader for VL Whole Slide
//! Microscopy images: one instance per pyramid level, tiles as frames of
//! native RGB8 pixel data, Explicit VR Little Endian only.

mod decode;
mod encode;
pub mod uid;

use std::fmt;

use thiserror::Error;

use crate::wsi::pyramid::tiles_across;
use crate::wsi::Level;

pub use decode::decode_instance;
pub use encode::{encode_instance, encode_level};
pub use uid::{is_valid_uid, make_uids, UidTriple, DEFAULT_UID_ROOT};

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";
pub const VL_WSI_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.77.1.6";
pub const IMPLEMENTATION_CLASS_UID: &str = "1.2.999.1.0.1";
pub const IMPLEMENTATION_VERSION_NAME: &str = "TILEPRESS_010";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl Tag {
    pub const fn group(self) -> u16 {
        self.0
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const FILE_META_GROUP_LENGTH: Tag = Tag(0x0002, 0x0000);
    pub const FILE_META_VERSION: Tag = Tag(0x0002, 0x0001);
    pub const MEDIA_STORAGE_SOP_CLASS_UID: Tag = Tag(0x0002, 0x0002);
    pub const MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const IMPLEMENTATION_CLASS_UID: Tag = Tag(0x0002, 0x0012);
    pub const IMPLEMENTATION_VERSION_NAME: Tag = Tag(0x0002, 0x0013);

    pub const IMAGE_TYPE: Tag = Tag(0x0008, 0x0008);
    pub const SOP_CLASS_UID: Tag = Tag(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag(0x0008, 0x0060);
    pub const STUDY_INSTANCE_UID: Tag = Tag(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const DIMENSION_ORGANIZATION_TYPE: Tag = Tag(0x0020, 0x9311);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const PHOTOMETRIC_INTERPRETATION: Tag = Tag(0x0028, 0x0004);
    pub const PLANAR_CONFIGURATION: Tag = Tag(0x0028, 0x0006);
    pub const NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const TOTAL_PIXEL_MATRIX_COLUMNS: Tag = Tag(0x0048, 0x0006);
    pub const TOTAL_PIXEL_MATRIX_ROWS: Tag = Tag(0x0048, 0x0007);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DicomError {
    #[error("invalid UID {0:?}")]
    UidInvalid(String),
    #[error("UID root {root:?} yields {total}-character UIDs (max 64)")]
    RootTooLong { root: String, total: usize },
    #[error("frame size mismatch: {0}")]
    FrameSizeMismatch(String),
    #[error("missing 128-byte preamble and DICM prefix")]
    MissingPreamble,
    #[error("unsupported transfer syntax {0:?}")]
    BadTransferSyntax(String),
    #[error("required tag {0} missing")]
    RequiredTagMissing(Tag),
    #[error("value of {tag} needs {needed} bytes, {available} available")]
    LengthOverrun {
        tag: Tag,
        needed: u64,
        available: u64,
    },
    #[error("malformed data set: {0}")]
    Malformed(String),
}

/// One encoded pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DicomInstance {
    pub sop_instance_uid: String,
    pub series_instance_uid: String,
    pub study_instance_uid: String,
    pub level_index: u32,
    /// (columns, rows) of the whole level.
    pub total_pixel_matrix: (u32, u32),
    /// Tile height.
    pub rows: u16,
    /// Tile width.
    pub columns: u16,
    pub number_of_frames: u32,
    pub frames: Vec<Vec<u8>>,
}

impl DicomInstance {
    pub fn from_level(
        level: &Level,
        uids: &UidTriple,
        level_index: u32,
    ) -> Result<Self, DicomError> {
        let tile = u16::try_from(level.tile_size).map_err(|_| {
            DicomError::FrameSizeMismatch(format!("tile size {} exceeds 65535", level.tile_size))
        })?;
        let inst = DicomInstance {
            sop_instance_uid: uids.sop.clone(),
            series_instance_uid: uids.series.clone(),
            study_instance_uid: uids.study.clone(),
            level_index,
            total_pixel_matrix: (level.width, level.height),
            rows: tile,
            columns: tile,
            number_of_frames: level.tiles.len() as u32,
            frames: level.tiles.clone(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn frame_bytes(&self) -> usize {
        self.rows as usize * self.columns as usize * 3
    }

    pub fn expected_frames(&self) -> u64 {
        let (cols, rows) = self.total_pixel_matrix;
        if self.rows == 0 || self.columns == 0 {
            return 0;
        }
        tiles_across(cols, self.columns as u32) as u64 * tiles_across(rows, self.rows as u32) as u64
    }

    pub fn validate(&self) -> Result<(), DicomError> {
        for uid in [
            &self.sop_instance_uid,
            &self.series_instance_uid,
            &self.study_instance_uid,
        ] {
            if !is_valid_uid(uid) {
                return Err(DicomError::UidInvalid(uid.clone()));
            }
        }
        if self.rows == 0 || self.columns == 0 {
            return Err(DicomError::FrameSizeMismatch("zero-sized tiles".into()));
        }
        if self.total_pixel_matrix.0 == 0 || self.total_pixel_matrix.1 == 0 {
            return Err(DicomError::FrameSizeMismatch("empty pixel matrix".into()));
        }
        let expected = self.expected_frames();
        if self.number_of_frames as u64 != expected || self.frames.len() as u64 != expected {
            return Err(DicomError::FrameSizeMismatch(format!(
                "{} frames declared, {} present, tile grid needs {expected}",
                self.number_of_frames,
                self.frames.len()
            )));
        }
        let size = self.frame_bytes();
        if let Some((i, f)) = self
            .frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != size)
        {
            return Err(DicomError::FrameSizeMismatch(format!(
                "frame {i} has {} bytes, expected {size}",
                f.len()
            )));
        }
        Ok(())
    }
}

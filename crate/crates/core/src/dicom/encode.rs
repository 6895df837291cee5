use super::tags::*;
use super::{
    DicomError, DicomInstance, Tag, UidTriple, EXPLICIT_VR_LITTLE_ENDIAN,
    IMPLEMENTATION_CLASS_UID as IMPL_UID, IMPLEMENTATION_VERSION_NAME, VL_WSI_STORAGE,
};
use crate::wsi::Level;

/// VRs whose explicit encoding uses two reserved bytes and a 32-bit length.
pub(crate) fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"UC" | b"UN" | b"UR" | b"UT"
    )
}

fn padding_for(vr: &[u8; 2]) -> u8 {
    match vr {
        b"UI" | b"OB" | b"UN" => 0,
        _ => b' ',
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn element(&mut self, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        let padded = value.len() + value.len() % 2;
        self.header(tag, vr, padded);
        self.out.extend_from_slice(value);
        if value.len() % 2 == 1 {
            self.out.push(padding_for(vr));
        }
    }

    fn header(&mut self, tag: Tag, vr: &[u8; 2], len: usize) {
        self.out.extend_from_slice(&tag.0.to_le_bytes());
        self.out.extend_from_slice(&tag.1.to_le_bytes());
        self.out.extend_from_slice(vr);
        if has_long_length(vr) {
            self.out.extend_from_slice(&[0, 0]);
            self.out.extend_from_slice(&(len as u32).to_le_bytes());
        } else {
            debug_assert!(len <= u16::MAX as usize);
            self.out.extend_from_slice(&(len as u16).to_le_bytes());
        }
    }

    fn text(&mut self, tag: Tag, vr: &[u8; 2], s: &str) {
        self.element(tag, vr, s.as_bytes());
    }

    fn us(&mut self, tag: Tag, v: u16) {
        self.element(tag, b"US", &v.to_le_bytes());
    }

    fn ul(&mut self, tag: Tag, v: u32) {
        self.element(tag, b"UL", &v.to_le_bytes());
    }
}

/// Encode one instance as a Part 10 byte stream.
pub fn encode_instance(inst: &DicomInstance) -> Result<Vec<u8>, DicomError> {
    inst.validate()?;

    let mut meta = Writer { out: Vec::new() };
    meta.element(FILE_META_VERSION, b"OB", &[0x00, 0x01]);
    meta.text(MEDIA_STORAGE_SOP_CLASS_UID, b"UI", VL_WSI_STORAGE);
    meta.text(
        MEDIA_STORAGE_SOP_INSTANCE_UID,
        b"UI",
        &inst.sop_instance_uid,
    );
    meta.text(TRANSFER_SYNTAX_UID, b"UI", EXPLICIT_VR_LITTLE_ENDIAN);
    meta.text(IMPLEMENTATION_CLASS_UID, b"UI", IMPL_UID);
    meta.text(
        super::tags::IMPLEMENTATION_VERSION_NAME,
        b"SH",
        IMPLEMENTATION_VERSION_NAME,
    );

    let pixel_len = inst.frames.len() * inst.frame_bytes();
    let mut w = Writer {
        out: Vec::with_capacity(132 + 12 + meta.out.len() + 1024 + pixel_len + 1),
    };
    w.out.resize(128, 0);
    w.out.extend_from_slice(b"DICM");
    w.ul(FILE_META_GROUP_LENGTH, meta.out.len() as u32);
    w.out.extend_from_slice(&meta.out);

    let image_type = if inst.level_index == 0 {
        "ORIGINAL\\PRIMARY\\VOLUME\\NONE"
    } else {
        "DERIVED\\PRIMARY\\VOLUME\\RESAMPLED"
    };
    w.text(IMAGE_TYPE, b"CS", image_type);
    w.text(SOP_CLASS_UID, b"UI", VL_WSI_STORAGE);
    w.text(SOP_INSTANCE_UID, b"UI", &inst.sop_instance_uid);
    w.text(MODALITY, b"CS", "SM");
    w.text(STUDY_INSTANCE_UID, b"UI", &inst.study_instance_uid);
    w.text(SERIES_INSTANCE_UID, b"UI", &inst.series_instance_uid);
    w.text(INSTANCE_NUMBER, b"IS", &(inst.level_index + 1).to_string());
    w.text(DIMENSION_ORGANIZATION_TYPE, b"CS", "TILED_FULL");
    w.us(SAMPLES_PER_PIXEL, 3);
    w.text(PHOTOMETRIC_INTERPRETATION, b"CS", "RGB");
    w.us(PLANAR_CONFIGURATION, 0);
    w.text(NUMBER_OF_FRAMES, b"IS", &inst.number_of_frames.to_string());
    w.us(ROWS, inst.rows);
    w.us(COLUMNS, inst.columns);
    w.us(BITS_ALLOCATED, 8);
    w.us(BITS_STORED, 8);
    w.us(HIGH_BIT, 7);
    w.us(PIXEL_REPRESENTATION, 0);
    w.ul(TOTAL_PIXEL_MATRIX_COLUMNS, inst.total_pixel_matrix.0);
    w.ul(TOTAL_PIXEL_MATRIX_ROWS, inst.total_pixel_matrix.1);

    w.header(PIXEL_DATA, b"OB", pixel_len + pixel_len % 2);
    for frame in &inst.frames {
        w.out.extend_from_slice(frame);
    }
    if pixel_len % 2 == 1 {
        w.out.push(0);
    }
    Ok(w.out)
}

/// Encode a pyramid level directly.
pub fn encode_level(
    level: &Level,
    uids: &UidTriple,
    level_index: u32,
) -> Result<Vec<u8>, DicomError> {
    encode_instance(&DicomInstance::from_level(level, uids, level_index)?)
}

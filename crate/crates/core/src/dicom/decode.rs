use std::collections::BTreeMap;

use super::encode::has_long_length;
use super::tags::*;
use super::{DicomError, DicomInstance, Tag, EXPLICIT_VR_LITTLE_ENDIAN, VL_WSI_STORAGE};

struct Element<'a> {
    vr: [u8; 2],
    value: &'a [u8],
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn available(&self) -> u64 {
        (self.bytes.len() - self.pos) as u64
    }

    fn take(&mut self, n: usize, tag: Tag) -> Result<&'a [u8], DicomError> {
        if n as u64 > self.available() {
            return Err(DicomError::LengthOverrun {
                tag,
                needed: n as u64,
                available: self.available(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn peek_tag(&self) -> Option<Tag> {
        let b = self.bytes.get(self.pos..self.pos + 4)?;
        Some(Tag(
            u16::from_le_bytes([b[0], b[1]]),
            u16::from_le_bytes([b[2], b[3]]),
        ))
    }

    /// One explicit-VR little-endian element.
    fn element(&mut self) -> Result<(Tag, Element<'a>), DicomError> {
        let unknown = Tag(0xFFFF, 0xFFFF);
        let head = self.take(6, unknown)?;
        let tag = Tag(
            u16::from_le_bytes([head[0], head[1]]),
            u16::from_le_bytes([head[2], head[3]]),
        );
        let vr = [head[4], head[5]];
        if !vr.iter().all(u8::is_ascii_uppercase) {
            return Err(DicomError::Malformed(format!(
                "{tag} has invalid VR bytes {vr:02X?}; only Explicit VR Little Endian is read"
            )));
        }
        let len = if has_long_length(&vr) {
            let b = self.take(6, tag)?;
            u32::from_le_bytes([b[2], b[3], b[4], b[5]])
        } else {
            let b = self.take(2, tag)?;
            u16::from_le_bytes([b[0], b[1]]) as u32
        };
        if len == u32::MAX {
            return Err(DicomError::Malformed(format!(
                "{tag} uses undefined length, not supported"
            )));
        }
        let value = self.take(len as usize, tag)?;
        Ok((tag, Element { vr, value }))
    }
}

type Elements<'a> = BTreeMap<Tag, Element<'a>>;

fn get<'a, 'b>(els: &'b Elements<'a>, tag: Tag) -> Result<&'b Element<'a>, DicomError> {
    els.get(&tag).ok_or(DicomError::RequiredTagMissing(tag))
}

fn text(els: &Elements<'_>, tag: Tag) -> Result<String, DicomError> {
    let el = get(els, tag)?;
    let s = std::str::from_utf8(el.value)
        .map_err(|_| DicomError::Malformed(format!("{tag} is not ASCII text")))?;
    Ok(s.trim_end_matches(['\0', ' ']).to_string())
}

fn expect_vr(tag: Tag, el: &Element<'_>, vr: &[u8; 2]) -> Result<(), DicomError> {
    if &el.vr != vr {
        return Err(DicomError::Malformed(format!(
            "{tag} has VR {}, expected {}",
            String::from_utf8_lossy(&el.vr),
            String::from_utf8_lossy(vr)
        )));
    }
    Ok(())
}

fn us(els: &Elements<'_>, tag: Tag) -> Result<u16, DicomError> {
    let el = get(els, tag)?;
    expect_vr(tag, el, b"US")?;
    let b: [u8; 2] = el.value.try_into().map_err(|_| {
        DicomError::Malformed(format!("{tag} US value is {} bytes", el.value.len()))
    })?;
    Ok(u16::from_le_bytes(b))
}

fn ul(els: &Elements<'_>, tag: Tag) -> Result<u32, DicomError> {
    let el = get(els, tag)?;
    expect_vr(tag, el, b"UL")?;
    let b: [u8; 4] = el.value.try_into().map_err(|_| {
        DicomError::Malformed(format!("{tag} UL value is {} bytes", el.value.len()))
    })?;
    Ok(u32::from_le_bytes(b))
}

fn int_string(els: &Elements<'_>, tag: Tag) -> Result<u32, DicomError> {
    let s = text(els, tag)?;
    s.trim()
        .parse()
        .map_err(|_| DicomError::Malformed(format!("{tag} is not an integer string: {s:?}")))
}

fn require_eq<T: PartialEq + std::fmt::Debug>(tag: Tag, got: T, want: T) -> Result<(), DicomError> {
    if got == want {
        Ok(())
    } else {
        Err(DicomError::Malformed(format!(
            "{tag} is {got:?}, expected {want:?}"
        )))
    }
}

/// Strictly parse a Part 10 stream produced for the WSI subset. Tags outside
/// the subset are skipped using their declared lengths.
pub fn decode_instance(bytes: &[u8]) -> Result<DicomInstance, DicomError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(DicomError::MissingPreamble);
    }
    let mut p = Parser { bytes, pos: 132 };

    let (tag, el) = p.element()?;
    if tag != FILE_META_GROUP_LENGTH {
        return Err(DicomError::RequiredTagMissing(FILE_META_GROUP_LENGTH));
    }
    expect_vr(tag, &el, b"UL")?;
    let group_len = u32::from_le_bytes(
        el.value
            .try_into()
            .map_err(|_| DicomError::Malformed("group length is not 4 bytes".into()))?,
    ) as usize;
    let meta_end = p.pos + group_len;
    if meta_end > bytes.len() {
        return Err(DicomError::LengthOverrun {
            tag: FILE_META_GROUP_LENGTH,
            needed: group_len as u64,
            available: p.available(),
        });
    }

    let mut meta = Elements::new();
    let mut last = tag;
    while p.pos < meta_end {
        let (tag, el) = p.element()?;
        if tag.group() != 0x0002 {
            return Err(DicomError::Malformed(format!(
                "{tag} inside the file meta group"
            )));
        }
        if tag <= last {
            return Err(DicomError::Malformed(format!(
                "{tag} out of order after {last}"
            )));
        }
        last = tag;
        meta.insert(tag, el);
    }
    if p.pos != meta_end {
        return Err(DicomError::Malformed(format!(
            "file meta group length {group_len} ends inside an element"
        )));
    }
    if p.peek_tag().is_some_and(|t| t.group() == 0x0002) {
        return Err(DicomError::Malformed(
            "file meta group length does not cover the whole group".into(),
        ));
    }

    let ts = text(&meta, TRANSFER_SYNTAX_UID)?;
    if ts != EXPLICIT_VR_LITTLE_ENDIAN {
        return Err(DicomError::BadTransferSyntax(ts));
    }
    let media_class = text(&meta, MEDIA_STORAGE_SOP_CLASS_UID)?;
    let media_instance = text(&meta, MEDIA_STORAGE_SOP_INSTANCE_UID)?;

    let mut ds = Elements::new();
    let mut last = Tag(0, 0);
    while p.available() > 0 {
        let (tag, el) = p.element()?;
        if tag <= last {
            return Err(DicomError::Malformed(format!(
                "{tag} out of order after {last}"
            )));
        }
        last = tag;
        ds.insert(tag, el);
    }

    let sop_class = text(&ds, SOP_CLASS_UID)?;
    require_eq(SOP_CLASS_UID, sop_class.as_str(), VL_WSI_STORAGE)?;
    require_eq(
        MEDIA_STORAGE_SOP_CLASS_UID,
        media_class.as_str(),
        VL_WSI_STORAGE,
    )?;
    let sop_instance_uid = text(&ds, SOP_INSTANCE_UID)?;
    require_eq(
        MEDIA_STORAGE_SOP_INSTANCE_UID,
        media_instance.as_str(),
        sop_instance_uid.as_str(),
    )?;
    let study_instance_uid = text(&ds, STUDY_INSTANCE_UID)?;
    let series_instance_uid = text(&ds, SERIES_INSTANCE_UID)?;
    require_eq(MODALITY, text(&ds, MODALITY)?.as_str(), "SM")?;
    get(&ds, IMAGE_TYPE)?;
    let instance_number = int_string(&ds, INSTANCE_NUMBER)?;
    if instance_number == 0 {
        return Err(DicomError::Malformed("InstanceNumber must be >= 1".into()));
    }

    require_eq(SAMPLES_PER_PIXEL, us(&ds, SAMPLES_PER_PIXEL)?, 3)?;
    require_eq(
        PHOTOMETRIC_INTERPRETATION,
        text(&ds, PHOTOMETRIC_INTERPRETATION)?.as_str(),
        "RGB",
    )?;
    require_eq(PLANAR_CONFIGURATION, us(&ds, PLANAR_CONFIGURATION)?, 0)?;
    require_eq(BITS_ALLOCATED, us(&ds, BITS_ALLOCATED)?, 8)?;
    require_eq(BITS_STORED, us(&ds, BITS_STORED)?, 8)?;
    require_eq(HIGH_BIT, us(&ds, HIGH_BIT)?, 7)?;
    require_eq(PIXEL_REPRESENTATION, us(&ds, PIXEL_REPRESENTATION)?, 0)?;

    let number_of_frames = int_string(&ds, NUMBER_OF_FRAMES)?;
    let rows = us(&ds, ROWS)?;
    let columns = us(&ds, COLUMNS)?;
    let total_cols = ul(&ds, TOTAL_PIXEL_MATRIX_COLUMNS)?;
    let total_rows = ul(&ds, TOTAL_PIXEL_MATRIX_ROWS)?;

    let mut inst = DicomInstance {
        sop_instance_uid,
        series_instance_uid,
        study_instance_uid,
        level_index: instance_number - 1,
        total_pixel_matrix: (total_cols, total_rows),
        rows,
        columns,
        number_of_frames,
        frames: Vec::new(),
    };
    let expected = inst.expected_frames();
    if expected == 0 || number_of_frames as u64 != expected {
        return Err(DicomError::Malformed(format!(
            "NumberOfFrames {number_of_frames} does not match the {expected}-tile grid"
        )));
    }

    let pixels = get(&ds, PIXEL_DATA)?;
    if &pixels.vr != b"OB" && &pixels.vr != b"OW" {
        return Err(DicomError::Malformed("PixelData must be OB or OW".into()));
    }
    let frame_bytes = inst.frame_bytes();
    let needed = number_of_frames as u64 * frame_bytes as u64;
    let have = pixels.value.len() as u64;
    if have < needed {
        return Err(DicomError::LengthOverrun {
            tag: PIXEL_DATA,
            needed,
            available: have,
        });
    }
    if have > needed + needed % 2 {
        return Err(DicomError::Malformed(format!(
            "PixelData holds {have} bytes, frames need {needed}"
        )));
    }
    inst.frames = pixels.value[..needed as usize]
        .chunks_exact(frame_bytes)
        .map(<[u8]>::to_vec)
        .collect();
    inst.validate()?;
    Ok(inst)
}

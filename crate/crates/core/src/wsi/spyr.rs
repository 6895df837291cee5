//! SPYR: the synthetic pyramidal slide container.
//!
//! ```text
//! "SPYR"
//! u32 version = 1, u32 width, u32 height, u32 tile_size, u32 level_count, u32 channels = 3
//! per level: u32 width, u32 height, then row-major RGB8 tiles, each tile_size² × 3 bytes
//! ```
//!
//! All integers little-endian. A file holds either a base level only or a
//! full pyramid down to the first level that fits in one tile.

use thiserror::Error;

use super::pyramid::{level_dimensions, tiles_across, Level, WsiPyramid, CHANNELS};

pub const MAGIC: &[u8; 4] = b"SPYR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpyrError {
    #[error("bad magic {0:?}, expected \"SPYR\"")]
    BadMagic(Vec<u8>),
    #[error("truncated payload at {field}: need {needed} bytes, {available} available")]
    TruncatedPayload {
        field: String,
        needed: u64,
        available: u64,
    },
    #[error("inconsistent header field {field}: {detail}")]
    HeaderInconsistent { field: String, detail: String },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
}

fn inconsistent(field: impl Into<String>, detail: impl Into<String>) -> SpyrError {
    SpyrError::HeaderInconsistent {
        field: field.into(),
        detail: detail.into(),
    }
}

/// Serialize a pyramid. Panics if the pyramid violates its own invariants.
pub fn write_spyr(pyramid: &WsiPyramid) -> Vec<u8> {
    let base = pyramid.base();
    let payload: usize = pyramid
        .levels
        .iter()
        .map(|l| 8 + l.tiles.len() * Level::tile_bytes(pyramid.tile_size))
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        base.width,
        base.height,
        pyramid.tile_size,
        pyramid.levels.len() as u32,
        CHANNELS as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for level in &pyramid.levels {
        assert!(level.is_well_formed() && level.tile_size == pyramid.tile_size);
        out.extend_from_slice(&level.width.to_le_bytes());
        out.extend_from_slice(&level.height.to_le_bytes());
        for tile in &level.tiles {
            out.extend_from_slice(tile);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> u64 {
        (self.bytes.len() - self.pos) as u64
    }

    fn take(&mut self, n: u64, field: &str) -> Result<&'a [u8], SpyrError> {
        if n > self.remaining() {
            return Err(SpyrError::TruncatedPayload {
                field: field.to_string(),
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, SpyrError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parse and fully validate a SPYR file. The returned pyramid has an empty
/// `slide_id`; the format does not carry one.
pub fn read_spyr(bytes: &[u8]) -> Result<WsiPyramid, SpyrError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(SpyrError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    let width = cur.u32("width")?;
    let height = cur.u32("height")?;
    let tile_size = cur.u32("tile_size")?;
    let level_count = cur.u32("level_count")?;
    let channels = cur.u32("channels")?;

    if version != VERSION {
        return Err(inconsistent(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    if channels != CHANNELS as u32 {
        return Err(inconsistent(
            "channels",
            format!("{channels}, only RGB (3) supported"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(inconsistent("width", format!("{width}x{height} is empty")));
    }
    if tile_size == 0 {
        return Err(inconsistent("tile_size", "must be >= 1"));
    }
    let expected = level_dimensions(width, height, tile_size);
    if level_count != 1 && level_count as usize != expected.len() {
        return Err(inconsistent(
            "level_count",
            format!(
                "{level_count} levels; a {width}x{height} slide with tile {tile_size} has 1 (base only) or {}",
                expected.len()
            ),
        ));
    }

    let tile_bytes = Level::tile_bytes(tile_size) as u64;
    let mut levels = Vec::with_capacity(level_count as usize);
    for (i, &(ew, eh)) in expected.iter().take(level_count as usize).enumerate() {
        let w = cur.u32(&format!("level[{i}].width"))?;
        let h = cur.u32(&format!("level[{i}].height"))?;
        if w != ew {
            return Err(inconsistent(
                format!("level[{i}].width"),
                format!("{w}, expected {ew}"),
            ));
        }
        if h != eh {
            return Err(inconsistent(
                format!("level[{i}].height"),
                format!("{h}, expected {eh}"),
            ));
        }
        let count = tiles_across(w, tile_size) as u64 * tiles_across(h, tile_size) as u64;
        let field = format!("level[{i}].tiles");
        let data = cur.take(count * tile_bytes, &field)?;
        let tiles = data
            .chunks_exact(tile_bytes as usize)
            .map(<[u8]>::to_vec)
            .collect();
        levels.push(Level {
            width: w,
            height: h,
            tile_size,
            tiles,
        });
    }
    if cur.remaining() != 0 {
        return Err(inconsistent(
            "payload_length",
            format!("{} trailing bytes after last level", cur.remaining()),
        ));
    }
    Ok(WsiPyramid {
        slide_id: String::new(),
        tile_size,
        levels,
    })
}

//! Deterministic synthetic slides for benchmarks and tests.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pyramid::{build_pyramid, Level, WsiPyramid, CHANNELS};
use super::spyr::{write_spyr, SpyrError};

pub const ALLOWED_TILE_SIZES: [u32; 2] = [256, 512];

fn check(width: u32, height: u32, tile_size: u32) -> Result<(), SpyrError> {
    if width == 0 || height == 0 {
        return Err(SpyrError::InvalidDimensions(format!(
            "{width}x{height}: both sides must be >= 1"
        )));
    }
    if !ALLOWED_TILE_SIZES.contains(&tile_size) {
        return Err(SpyrError::InvalidDimensions(format!(
            "tile size {tile_size} not in {ALLOWED_TILE_SIZES:?}"
        )));
    }
    Ok(())
}

/// Base-resolution pixels: a colour gradient, a coarse blocky "tissue"
/// pattern, and per-pixel noise. Each row draws from its own ChaCha stream so
/// rows can be generated in parallel without changing the output.
pub fn synthetic_base(slide_id: &str, width: u32, height: u32, tile_size: u32, seed: u64) -> Level {
    let mut h = FnvHasher::default();
    h.write(slide_id.as_bytes());
    let key = seed ^ h.finish();
    let (w, hgt) = (width as usize, height as usize);
    let mut raster = vec![0u8; w * hgt * CHANNELS];
    raster
        .par_chunks_mut(w * CHANNELS)
        .enumerate()
        .for_each(|(y, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(y as u64);
            let gy = (y * 255 / hgt.max(2).saturating_sub(1).max(1)) as i32;
            for x in 0..w {
                let gx = (x * 255 / w.max(2).saturating_sub(1).max(1)) as i32;
                let tissue = ((((x / 37) ^ (y / 53)) & 7) * 12) as i32;
                let noise: u32 = rng.random();
                let n = |shift: u32| ((noise >> shift) & 0x3f) as i32 - 32;
                let px = &mut row[x * CHANNELS..(x + 1) * CHANNELS];
                px[0] = (gx / 2 + 96 + tissue + n(0)).clamp(0, 255) as u8;
                px[1] = (gy / 2 + 64 + n(8)).clamp(0, 255) as u8;
                px[2] = ((gx + gy) / 4 + 128 - tissue + n(16)).clamp(0, 255) as u8;
            }
        });
    Level::from_raster(width, height, tile_size, &raster)
}

pub fn generate_pyramid(
    slide_id: &str,
    width: u32,
    height: u32,
    tile_size: u32,
    seed: u64,
) -> Result<WsiPyramid, SpyrError> {
    check(width, height, tile_size)?;
    Ok(build_pyramid(
        slide_id,
        synthetic_base(slide_id, width, height, tile_size, seed),
    ))
}

/// A full-pyramid SPYR file. Identical arguments give identical bytes.
pub fn generate_slide(
    slide_id: &str,
    width: u32,
    height: u32,
    tile_size: u32,
    seed: u64,
) -> Result<Vec<u8>, SpyrError> {
    Ok(write_spyr(&generate_pyramid(
        slide_id, width, height, tile_size, seed,
    )?))
}

/// A SPYR file holding only the base level; converters must build the rest.
pub fn generate_base_only(
    slide_id: &str,
    width: u32,
    height: u32,
    tile_size: u32,
    seed: u64,
) -> Result<Vec<u8>, SpyrError> {
    check(width, height, tile_size)?;
    Ok(write_spyr(&WsiPyramid {
        slide_id: slide_id.to_string(),
        tile_size,
        levels: vec![synthetic_base(slide_id, width, height, tile_size, seed)],
    }))
}

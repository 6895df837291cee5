use rayon::prelude::*;

/// Bytes per pixel; every level is interleaved RGB8.
pub const CHANNELS: usize = 3;

/// One resolution layer, stored as row-major tiles. Edge tiles are padded
/// with zeros out to the full tile size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub tiles: Vec<Vec<u8>>,
}

pub fn tiles_across(extent: u32, tile_size: u32) -> u32 {
    extent.div_ceil(tile_size)
}

impl Level {
    pub fn tile_bytes(tile_size: u32) -> usize {
        tile_size as usize * tile_size as usize * CHANNELS
    }

    pub fn grid(&self) -> (u32, u32) {
        (
            tiles_across(self.width, self.tile_size),
            tiles_across(self.height, self.tile_size),
        )
    }

    pub fn tile_count(&self) -> usize {
        let (c, r) = self.grid();
        c as usize * r as usize
    }

    /// Cut a contiguous `width × height` RGB8 raster into padded tiles.
    pub fn from_raster(width: u32, height: u32, tile_size: u32, raster: &[u8]) -> Level {
        assert!(width >= 1 && height >= 1 && tile_size >= 1);
        assert_eq!(raster.len(), width as usize * height as usize * CHANNELS);
        let (cols, rows) = (
            tiles_across(width, tile_size),
            tiles_across(height, tile_size),
        );
        let ts = tile_size as usize;
        let tiles = (0..rows * cols)
            .into_par_iter()
            .map(|i| {
                let (tx, ty) = ((i % cols) as usize, (i / cols) as usize);
                let mut tile = vec![0u8; Level::tile_bytes(tile_size)];
                let x0 = tx * ts;
                let span = ts.min(width as usize - x0) * CHANNELS;
                for dy in 0..ts {
                    let y = ty * ts + dy;
                    if y >= height as usize {
                        break;
                    }
                    let src = (y * width as usize + x0) * CHANNELS;
                    tile[dy * ts * CHANNELS..dy * ts * CHANNELS + span]
                        .copy_from_slice(&raster[src..src + span]);
                }
                tile
            })
            .collect();
        Level {
            width,
            height,
            tile_size,
            tiles,
        }
    }

    /// Reassemble the visible pixels, dropping tile padding.
    pub fn to_raster(&self) -> Vec<u8> {
        let (w, h, ts) = (
            self.width as usize,
            self.height as usize,
            self.tile_size as usize,
        );
        let cols = tiles_across(self.width, self.tile_size) as usize;
        let mut raster = vec![0u8; w * h * CHANNELS];
        raster
            .par_chunks_mut(w * CHANNELS)
            .enumerate()
            .for_each(|(y, row)| {
                let (ty, dy) = (y / ts, y % ts);
                for tx in 0..cols {
                    let x0 = tx * ts;
                    let span = ts.min(w - x0) * CHANNELS;
                    let tile = &self.tiles[ty * cols + tx];
                    row[x0 * CHANNELS..x0 * CHANNELS + span]
                        .copy_from_slice(&tile[dy * ts * CHANNELS..dy * ts * CHANNELS + span]);
                }
            });
        raster
    }

    /// Structural check of the type invariants.
    pub fn is_well_formed(&self) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.tile_size >= 1
            && self.tiles.len() == self.tile_count()
            && self
                .tiles
                .iter()
                .all(|t| t.len() == Level::tile_bytes(self.tile_size))
    }
}

/// Half-size level: every output pixel is the rounded-half-up mean of its
/// 2×2 source block. Odd edges replicate the last row/column; padding never
/// contributes.
pub fn downsample_level(src: &Level) -> Level {
    let (w, h) = (src.width as usize, src.height as usize);
    let raster = src.to_raster();
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![0u8; ow * oh * CHANNELS];
    out.par_chunks_mut(ow * CHANNELS)
        .enumerate()
        .for_each(|(y, row)| {
            let y0 = 2 * y;
            let y1 = (y0 + 1).min(h - 1);
            let r0 = &raster[y0 * w * CHANNELS..(y0 + 1) * w * CHANNELS];
            let r1 = &raster[y1 * w * CHANNELS..(y1 + 1) * w * CHANNELS];
            for x in 0..ow {
                let x0 = 2 * x;
                let x1 = (x0 + 1).min(w - 1);
                for c in 0..CHANNELS {
                    let sum = r0[x0 * CHANNELS + c] as u32
                        + r0[x1 * CHANNELS + c] as u32
                        + r1[x0 * CHANNELS + c] as u32
                        + r1[x1 * CHANNELS + c] as u32;
                    row[x * CHANNELS + c] = ((sum + 2) / 4) as u8;
                }
            }
        });
    Level::from_raster(ow as u32, oh as u32, src.tile_size, &out)
}

/// Multi-resolution tiled slide. `levels[0]` is full resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WsiPyramid {
    pub slide_id: String,
    pub tile_size: u32,
    pub levels: Vec<Level>,
}

impl WsiPyramid {
    pub fn base(&self) -> &Level {
        &self.levels[0]
    }
}

/// Dimensions of every level for a base of `width × height`.
pub fn level_dimensions(width: u32, height: u32, tile_size: u32) -> Vec<(u32, u32)> {
    let mut dims = vec![(width, height)];
    let (mut w, mut h) = (width, height);
    while w.max(h) > tile_size {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        dims.push((w, h));
    }
    dims
}

/// Halve repeatedly until the level fits in one tile along its longer side.
pub fn build_pyramid(slide_id: &str, base: Level) -> WsiPyramid {
    let tile_size = base.tile_size;
    let mut levels = vec![base];
    loop {
        let last = levels.last().expect("non-empty");
        if last.width.max(last.height) <= tile_size {
            break;
        }
        let next = downsample_level(last);
        levels.push(next);
    }
    WsiPyramid {
        slide_id: slide_id.to_string(),
        tile_size,
        levels,
    }
}

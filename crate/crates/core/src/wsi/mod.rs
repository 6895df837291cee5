//! Whole-slide pyramids: the SPYR container, a synthetic slide generator and
//! box-filter pyramid construction.

pub mod generate;
pub mod pyramid;
pub mod spyr;

pub use generate::{generate_base_only, generate_pyramid, generate_slide};
pub use pyramid::{build_pyramid, downsample_level, level_dimensions, Level, WsiPyramid};
pub use spyr::{read_spyr, write_spyr, SpyrError};

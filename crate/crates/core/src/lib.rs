//! Unified room-layout estimation for panoramic and perspective images.
//!
//! Perspective views are projected onto the equirectangular grid, shifted in
//! latitude by their pitch, cropped to their informative columns and passed
//! with panoramas through a shared network that predicts a ceiling and floor
//! latitude per column.

// `!(x < y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Column loops index several parallel arrays.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};
pub use par::Execution;

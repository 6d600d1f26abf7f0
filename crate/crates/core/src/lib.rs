//! Text-guided LiDAR range-image diffusion.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod annotate;
pub mod checkpoint;
pub mod cli;
pub mod controlnet;
pub mod dpe;
pub mod engine;
pub mod error;
pub mod evalmetrics;
pub mod io;
pub mod nn;
pub mod rangemap;
pub mod sampling;
pub mod schedule;
pub mod synthscene;
pub mod textenc;
pub mod training;

pub use error::{Error, Result};

//! Alignment of paired low- and high-quality RGB-D recordings, ground-truth
//! generation by z-buffered reprojection, classical denoising baselines and
//! masked evaluation, with a synthetic two-sensor rig for testing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod filters;
pub mod geometry;
pub mod groundtruth;
pub mod sequence_io;
pub mod simulator;
pub mod spatial_align;
pub mod stacking;
pub mod temporal_align;

pub use error::{Error, LoadError, Result};

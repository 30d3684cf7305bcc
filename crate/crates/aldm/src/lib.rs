//! Desk-scale laboratory for adversarially supervised layout-to-image
//! diffusion training: a segmenter-based discriminator gives per-pixel
//! layout feedback to a small diffusion denoiser, and a multistep
//! unrolling engine extends that feedback over a sampling-time window.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod synthdata;
pub mod tape;
pub mod trainer;
pub mod unroll;

pub use error::{AldmError, Result};

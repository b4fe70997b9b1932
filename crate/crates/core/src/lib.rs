//! Region-aware stitching of a large and a small diffusion denoiser.
//!
//! - [`tensor`]: deterministic `f32` grid kernels, seeded sampling, `SGRD` dumps.
//! - [`tinydit`]: toy DiT denoisers with full and KV-padded masked forwards.
//! - [`stitcher`]: the staged scheduler, switch metric and generation loop.
//! - [`cost`]: analytical latency model and trace validation.
//! - [`analysis`]: divergence, switch-step and mask-latency studies.
//! - [`config`]: JSON run configuration.

pub mod analysis;
pub mod config;
pub mod cost;
pub mod error;
pub mod stitcher;
pub mod tensor;
pub mod tinydit;

pub use error::{Error, Result};

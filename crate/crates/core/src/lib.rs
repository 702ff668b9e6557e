//! Trajectory-conditioned layout guidance for a sandbox latent diffusion
//! model.
//!
//! A user draws a polyline per prompt token; distance fields to those
//! polylines drive control and movement energies over the denoiser's
//! cross-attention maps, and the gradient of that energy w.r.t. the latent
//! steers sampling during the first denoising steps.

pub mod ablation;
pub mod energy;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod render;
pub mod schedule;
pub mod verify;
pub mod vocab;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{CellSet, DistanceField, GridDims, Trajectory};
pub use guidance::{guided_sample, GuidanceConfig, Mode, SampleResult};
pub use model::{embed_tokens, LatentState, ModelConfig, SandboxModel, TokenSet};

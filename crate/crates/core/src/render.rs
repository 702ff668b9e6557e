//! Sandbox decoder: turns the final latent into one Gaussian blob per token.
//!
//! Each blob sits at the attention-weighted centroid of the token's column
//! in the last cross-attention layer, with a radius equal to the column's
//! attention-weighted spread. Its disk footprint is the ground-truth mask.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{CellSet, GridDims};
use crate::metrics::{InstanceMask, MaskSource};
use crate::model::{column_moments, LatentState, SandboxModel, TokenSet};

/// Image pixels per latent cell along each axis.
pub const RENDER_SCALE: usize = 8;

/// Blobs fainter than this leave a pixel unlabeled.
const LABEL_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub token: usize,
    /// Image-space `(row, col)`.
    pub center: (f64, f64),
    /// Image-space standard deviation; also the footprint radius.
    pub sigma: f64,
}

impl Blob {
    pub fn value(&self, row: f64, col: f64) -> f64 {
        let (dr, dc) = (row - self.center.0, col - self.center.1);
        (-(dr * dr + dc * dc) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Grayscale intensity in `[0, 1]` plus a per-pixel label (0 = background,
/// `i + 1` = token `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub dims: GridDims,
    pub intensity: Vec<f64>,
    pub labels: Vec<u16>,
}

impl Image {
    pub fn to_gray8(&self) -> Vec<u8> {
        self.intensity
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Render {
    pub image: Image,
    pub blobs: Vec<Blob>,
    pub masks: Vec<InstanceMask>,
}

/// Latent-grid coordinate to image-space coordinate (cell centers align).
pub fn latent_to_image(x: f64) -> f64 {
    let s = RENDER_SCALE as f64;
    x * s + (s - 1.0) / 2.0
}

pub fn render_scene(model: &SandboxModel, z0: &LatentState, tokens: &TokenSet) -> Result<Render> {
    let out = model.denoise_step(z0, tokens)?;
    let last = out.attention.last().expect("model has at least one layer");
    let base = model.dims();
    let scale = base.height / last.dims.height;
    let dims = base.scaled(RENDER_SCALE);

    let blobs: Vec<Blob> = (0..tokens.len())
        .map(|token| {
            let ((r, c), spread) = column_moments(last.column(token), last.dims);
            // Coarse-layer cell centers in latent coordinates.
            let to_latent = |x: f64| x * scale as f64 + (scale as f64 - 1.0) / 2.0;
            let center = (
                latent_to_image(to_latent(r)).clamp(0.0, (dims.height - 1) as f64),
                latent_to_image(to_latent(c)).clamp(0.0, (dims.width - 1) as f64),
            );
            let sigma = (spread * (scale * RENDER_SCALE) as f64).max(1.0);
            Blob { token, center, sigma }
        })
        .collect();

    let mut intensity = vec![0.0; dims.len()];
    let mut labels = vec![0u16; dims.len()];
    let mut masks: Vec<InstanceMask> = blobs
        .iter()
        .map(|b| InstanceMask {
            token_index: b.token,
            cells: CellSet::new(dims),
            source: MaskSource::GroundTruth,
        })
        .collect();
    for i in 0..dims.len() {
        let (r, c) = dims.cell(i);
        let (rf, cf) = (r as f64, c as f64);
        let mut best = (0.0, 0u16);
        for b in &blobs {
            let v = b.value(rf, cf);
            if v > best.0 {
                best = (v, b.token as u16 + 1);
            }
            let (dr, dc) = (rf - b.center.0, cf - b.center.1);
            if dr * dr + dc * dc <= b.sigma * b.sigma {
                masks[b.token].cells.insert((r, c));
            }
        }
        intensity[i] = best.0;
        labels[i] = if best.0 >= LABEL_FLOOR { best.1 } else { 0 };
    }
    // The footprint always holds the pixel under the center.
    for b in &blobs {
        let cell = (b.center.0.round() as usize, b.center.1.round() as usize);
        masks[b.token].cells.insert(cell);
    }

    Ok(Render {
        image: Image {
            dims,
            intensity,
            labels,
        },
        blobs,
        masks,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal levels `ᾱ_t` of a linear-β DDPM schedule, indexed by
/// timestep `0..=T` with `ᾱ_0 = 1` (clean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `σ_t = √((1 − ᾱ_t) / ᾱ_t)`, the noise-to-signal ratio that scales
    /// guidance steps.
    pub fn sigma(&self, t: usize) -> f64 {
        sigma_from_alpha(self.alpha(t))
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

pub fn sigma_from_alpha(alpha: f64) -> f64 {
    ((1.0 - alpha) / alpha).sqrt()
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("at least one step required".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut alphas_cumprod = Vec::with_capacity(steps + 1);
    alphas_cumprod.push(1.0);
    let mut acc = 1.0;
    for s in 0..steps {
        let frac = if steps == 1 { 0.0 } else { s as f64 / (steps - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        acc *= 1.0 - beta;
        alphas_cumprod.push(acc);
    }
    Ok(NoiseSchedule { alphas_cumprod })
}

//! Seeded oracle suites: brute-force distance transforms and finite-difference
//! gradient checks. The CLI's `verify-edt` / `verify-grad` run these.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::energy::{energy_grad_wrt_attention, total_energy, EnergyConfig, TokenConstraint};
use crate::error::{Error, Result};
use crate::formats::trace::AttentionTrace;
use crate::geometry::{distance_transform, CellSet, GridDims, Trajectory};
use crate::guidance::distance_constraints;
use crate::model::{embed_tokens, AttentionMap, LatentState, ModelConfig, SandboxModel, TokenSet};
use crate::vocab::VOCAB;

pub const EDT_TOL: f64 = 1e-12;
pub const ATTENTION_GRAD_TOL: f64 = 1e-6;
pub const LATENT_GRAD_TOL: f64 = 1e-4;
pub const ATTENTION_FD_STEP: f64 = 1e-6;
pub const LATENT_FD_STEP: f64 = 1e-4;

/// Test hook: deliberately breaks the quantity under test so the failure
/// path (exit code, worst-case dump) can be exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    Seeded,
}

/// Minimum distance from every cell to any source, by exhaustive search.
pub fn brute_force_distance(src: &CellSet) -> Vec<f64> {
    let dims = src.dims;
    (0..dims.len())
        .map(|i| {
            let (r, c) = dims.cell(i);
            src.iter()
                .map(|(sr, sc)| {
                    let (dr, dc) = (r as f64 - sr as f64, c as f64 - sc as f64);
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// A random non-empty source set on a grid of at most `max_dim` per side.
pub fn random_sources(rng: &mut impl Rng, max_dim: usize) -> CellSet {
    let dims = GridDims::new(rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim));
    let mut src = CellSet::new(dims);
    let density: f64 = match rng.gen_range(0..3) {
        0 => 0.002,
        1 => 0.02,
        _ => 0.2,
    };
    for i in 0..dims.len() {
        if rng.gen_bool(density) {
            src.insert(dims.cell(i));
        }
    }
    if src.is_empty() {
        src.insert((rng.gen_range(0..dims.height), rng.gen_range(0..dims.width)));
    }
    src
}

#[derive(Debug, Clone, Serialize)]
pub struct EdtReport {
    pub cases: usize,
    pub max_abs_err: f64,
    pub worst_case: usize,
    pub worst_dims: GridDims,
    pub passed: bool,
    /// Worst instance as a 3-layer, 1-token trace: source indicator, the
    /// transform, and the brute-force distances.
    #[serde(skip)]
    pub worst_trace: AttentionTrace,
}

pub fn verify_edt(cases: usize, seed: u64, max_dim: usize, corruption: Corruption) -> Result<EdtReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<(f64, usize, CellSet, Vec<f64>, Vec<f64>)> = None;
    for case in 0..cases {
        let src = random_sources(&mut rng, max_dim);
        let mut fast = distance_transform(&src)?.values;
        if corruption == Corruption::Seeded && case == cases / 2 {
            let i = rng.gen_range(0..fast.len());
            fast[i] += 1e-6;
        }
        let slow = brute_force_distance(&src);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if worst.as_ref().map_or(true, |w| err > w.0) {
            worst = Some((err, case, src, fast, slow));
        }
    }
    let (max_abs_err, worst_case, src, fast, slow) =
        worst.ok_or_else(|| Error::InvalidConfig("verify-edt needs at least one case".into()))?;
    let dims = src.dims;
    let mut worst_trace = AttentionTrace::new(dims, 1, 3);
    worst_trace.steps = 1;
    for layer in [src.indicator(), fast, slow] {
        worst_trace.payload.extend(layer.iter().map(|&x| x as f32));
    }
    Ok(EdtReport {
        cases,
        max_abs_err,
        worst_case,
        worst_dims: dims,
        passed: max_abs_err <= EDT_TOL,
        worst_trace,
    })
}

/// A random gradient-check instance: small model, prompt, trajectories,
/// latent.
pub struct GradCase {
    pub model: SandboxModel,
    pub tokens: TokenSet,
    pub trajectories: Vec<Trajectory>,
    pub state: LatentState,
    pub energy: EnergyConfig,
}

fn random_polyline(rng: &mut impl Rng, dims: GridDims) -> Vec<[f64; 2]> {
    let n = rng.gen_range(1..=4);
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..(dims.height - 1) as f64),
                rng.gen_range(0.0..(dims.width - 1) as f64),
            ]
        })
        .collect()
}

pub fn random_trajectory(rng: &mut impl Rng, token: usize, dims: GridDims) -> Trajectory {
    let polylines: Vec<_> = (0..rng.gen_range(1..=2)).map(|_| random_polyline(rng, dims)).collect();
    let weights = polylines.iter().map(|_| if rng.gen_bool(0.3) { 2.0 } else { 1.0 }).collect();
    Trajectory::new(token, polylines).with_weights(weights)
}

pub fn random_grad_case(rng: &mut impl Rng) -> Result<GradCase> {
    let side = [4, 8][rng.gen_range(0..2)];
    let cfg = ModelConfig {
        seed: rng.gen(),
        height: side,
        width: [4, 8][rng.gen_range(0..2)],
        ..ModelConfig::default()
    };
    let model = SandboxModel::new(cfg)?;
    let m = rng.gen_range(1..=4);
    let prompt: Vec<u32> = (0..m).map(|_| rng.gen_range(0..VOCAB.len() as u32)).collect();
    let tokens = embed_tokens(&prompt, cfg.d_k, cfg.seed)?;
    let constrained = rng.gen_range(1..=m);
    let trajectories = (0..constrained)
        .map(|t| random_trajectory(rng, t, cfg.dims()))
        .collect();
    let state = LatentState::noise(&cfg, rng.gen(), 1);
    let energy = EnergyConfig {
        lambda: [0.0, 1.0, 10.0][rng.gen_range(0..3)],
        ..EnergyConfig::default()
    };
    Ok(GradCase {
        model,
        tokens,
        trajectories,
        state,
        energy,
    })
}

impl GradCase {
    fn layers(&self) -> Vec<usize> {
        (0..self.model.layer_count()).collect()
    }

    pub fn constraints(&self) -> Result<Vec<TokenConstraint>> {
        distance_constraints(&self.model, &self.trajectories)
    }

    pub fn attention(&self, state: &LatentState) -> Result<Vec<AttentionMap>> {
        Ok(self.model.denoise_step(state, &self.tokens)?.attention)
    }

    pub fn energy_at(&self, state: &LatentState, constraints: &[TokenConstraint]) -> Result<f64> {
        let maps = self.attention(state)?;
        Ok(total_energy(&maps, constraints, &self.layers(), &self.energy)?.e_total)
    }

    /// Relative error `‖g − g_fd‖ / ‖g_fd‖` of the attention-side gradient.
    pub fn attention_error(&self, corruption: Corruption) -> Result<f64> {
        let constraints = self.constraints()?;
        let layers = self.layers();
        let maps = self.attention(&self.state)?;
        let mut analytic = energy_grad_wrt_attention(&maps, &constraints, &layers, &self.energy)?;
        if corruption == Corruption::Seeded {
            analytic[0] *= 1.01;
        }
        let h = ATTENTION_FD_STEP;
        let mut numeric: Vec<Array2<f64>> = maps.iter().map(|m| Array2::zeros(m.values.dim())).collect();
        let mut probe = maps.clone();
        for l in 0..maps.len() {
            for c in &constraints {
                for i in 0..maps[l].values.nrows() {
                    let x = maps[l].values[[i, c.token]];
                    probe[l].values[[i, c.token]] = x + h;
                    let up = total_energy(&probe, &constraints, &layers, &self.energy)?.e_total;
                    probe[l].values[[i, c.token]] = x - h;
                    let down = total_energy(&probe, &constraints, &layers, &self.energy)?.e_total;
                    probe[l].values[[i, c.token]] = x;
                    numeric[l][[i, c.token]] = (up - down) / (2.0 * h);
                }
            }
        }
        Ok(relative_error(
            analytic.iter().flat_map(|a| a.iter().copied()),
            numeric.iter().flat_map(|a| a.iter().copied()),
        ))
    }

    /// Relative error of the end-to-end latent gradient.
    pub fn latent_error(&self, corruption: Corruption) -> Result<f64> {
        let constraints = self.constraints()?;
        let layers = self.layers();
        let maps = self.attention(&self.state)?;
        let grad_a = energy_grad_wrt_attention(&maps, &constraints, &layers, &self.energy)?;
        let mut analytic = self.model.grad_energy_wrt_latent(&self.state, &self.tokens, &grad_a)?;
        if corruption == Corruption::Seeded {
            analytic *= 1.01;
        }
        let h = LATENT_FD_STEP;
        let mut probe = self.state.clone();
        let mut numeric = Vec::with_capacity(probe.z.len());
        for idx in 0..probe.z.len() {
            let x = probe.z.as_slice().expect("standard layout")[idx];
            probe.z.as_slice_mut().expect("standard layout")[idx] = x + h;
            let up = self.energy_at(&probe, &constraints)?;
            probe.z.as_slice_mut().expect("standard layout")[idx] = x - h;
            let down = self.energy_at(&probe, &constraints)?;
            probe.z.as_slice_mut().expect("standard layout")[idx] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        Ok(relative_error(analytic.iter().copied(), numeric.into_iter()))
    }
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-12)`.
pub fn relative_error(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (x, y) in a.zip(b) {
        diff += (x - y) * (x - y);
        norm += y * y;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub cases: usize,
    pub attention_max_rel: f64,
    pub latent_max_rel: f64,
    pub worst_attention_case: usize,
    pub worst_latent_case: usize,
    pub passed: bool,
    /// Attention maps of the worst instance, one step.
    #[serde(skip)]
    pub worst_trace: AttentionTrace,
}

pub fn verify_grad(cases: usize, seed: u64, corruption: Corruption) -> Result<GradReport> {
    if cases == 0 {
        return Err(Error::InvalidConfig("verify-grad needs at least one case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        cases,
        attention_max_rel: 0.0,
        latent_max_rel: 0.0,
        worst_attention_case: 0,
        worst_latent_case: 0,
        passed: false,
        worst_trace: AttentionTrace::new(GridDims::new(1, 1), 1, 1),
    };
    let mut worst_score = f64::NEG_INFINITY;
    for i in 0..cases {
        let case = random_grad_case(&mut rng)?;
        let hit = if i == cases / 2 { corruption } else { Corruption::None };
        let ea = case.attention_error(hit)?;
        let el = case.latent_error(hit)?;
        if ea > report.attention_max_rel || i == 0 {
            report.attention_max_rel = ea;
            report.worst_attention_case = i;
        }
        if el > report.latent_max_rel || i == 0 {
            report.latent_max_rel = el;
            report.worst_latent_case = i;
        }
        let score = (ea / ATTENTION_GRAD_TOL).max(el / LATENT_GRAD_TOL);
        if score > worst_score {
            worst_score = score;
            let maps = case.attention(&case.state)?;
            let mut trace = AttentionTrace::new(case.model.dims(), case.tokens.len(), maps.len());
            trace.push_step(&maps)?;
            report.worst_trace = trace;
        }
    }
    report.passed = report.attention_max_rel <= ATTENTION_GRAD_TOL && report.latent_max_rel <= LATENT_GRAD_TOL;
    Ok(report)
}

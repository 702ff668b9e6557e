//! Distance-aware attention energies and their gradients w.r.t. attention.
//!
//! For one token column `A` and distance field `D`:
//!
//! * control:  `E_c = (1 − Σ (D+ε)⁻¹·A / Σ A)²`
//! * movement: `E_m = (1 − Σ A / max(Σ D·A, floor))²`
//! * total:    `E = E_c + λ·E_m`
//!
//! Region (box / mask) baselines use `(1 − Σ_region A / Σ A)²` with a 0/1
//! (or fractional, after resampling) region weight per location.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellSet, GridDims, Trajectory};
use crate::model::AttentionMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub denom_floor: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            epsilon: 1.0,
            denom_floor: 1e-8,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.denom_floor > 0.0) {
            return Err(Error::InvalidConfig("denom_floor must be > 0".into()));
        }
        Ok(())
    }
}

fn mass(a: ArrayView1<'_, f64>, cfg: &EnergyConfig) -> Result<f64> {
    let s = a.sum();
    if !(s >= cfg.denom_floor) {
        return Err(Error::DegenerateAttention { mass: s });
    }
    Ok(s)
}

fn check_len(a: ArrayView1<'_, f64>, d: &[f64]) -> Result<()> {
    if a.len() != d.len() {
        return Err(Error::Shape(format!(
            "attention column of {} cells vs field of {}",
            a.len(),
            d.len()
        )));
    }
    Ok(())
}

/// Returns `(E, ∂E/∂A)` for `(1 − Σ w·A / Σ A)²`.
fn weighted_ratio_energy(
    a: ArrayView1<'_, f64>,
    weight: impl Fn(usize) -> f64,
    s: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let num: f64 = a.iter().enumerate().map(|(i, &x)| weight(i) * x).sum();
    let r = num / s;
    if let Some(g) = grad {
        let k = -2.0 * (1.0 - r) / s;
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += k * (weight(i) - r);
        }
    }
    (1.0 - r) * (1.0 - r)
}

fn control_inner(a: ArrayView1<'_, f64>, d: &[f64], cfg: &EnergyConfig, grad: Option<&mut [f64]>) -> Result<f64> {
    check_len(a, d)?;
    let s = mass(a, cfg)?;
    Ok(weighted_ratio_energy(a, |i| 1.0 / (d[i] + cfg.epsilon), s, grad))
}

fn movement_inner(
    a: ArrayView1<'_, f64>,
    d: &[f64],
    cfg: &EnergyConfig,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_len(a, d)?;
    let s = mass(a, cfg)?;
    let p: f64 = a.iter().zip(d).map(|(x, y)| x * y).sum();
    let clamped = p < cfg.denom_floor;
    let denom = if clamped { cfg.denom_floor } else { p };
    let q = s / denom;
    if let Some(g) = grad {
        let k = -2.0 * (1.0 - q) * scale;
        for (gi, &di) in g.iter_mut().zip(d) {
            let dq = if clamped { 1.0 / denom } else { (1.0 - q * di) / denom };
            *gi += k * dq;
        }
    }
    Ok((1.0 - q) * (1.0 - q))
}

/// Control energy of one attention column against its distance field.
pub fn control_energy(a: ArrayView1<'_, f64>, dist: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    control_inner(a, dist, cfg, None)
}

/// Movement energy: pulls the attention-weighted mean distance toward one
/// cell, suppressing mass far from the trajectory.
pub fn movement_energy(a: ArrayView1<'_, f64>, dist: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    movement_inner(a, dist, cfg, 1.0, None)
}

/// `(1 − Σ_region A / Σ A)²`; zero iff all mass is inside the region.
pub fn box_energy(a: ArrayView1<'_, f64>, region: &[f64]) -> Result<f64> {
    region_energy(a, region, &EnergyConfig::default(), None)
}

fn region_energy(a: ArrayView1<'_, f64>, region: &[f64], cfg: &EnergyConfig, grad: Option<&mut [f64]>) -> Result<f64> {
    check_len(a, region)?;
    if !region.iter().any(|&w| w > 0.0) {
        return Err(Error::EmptyBox);
    }
    let s = mass(a, cfg)?;
    Ok(weighted_ratio_energy(a, |i| region[i], s, grad))
}

/// Inclusive rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CellBox {
    pub fn indicator(&self, dims: GridDims) -> Vec<f64> {
        let mut out = vec![0.0; dims.len()];
        for r in self.top..=self.bottom.min(dims.height.saturating_sub(1)) {
            for c in self.left..=self.right.min(dims.width.saturating_sub(1)) {
                out[dims.index(r, c)] = 1.0;
            }
        }
        out
    }

    /// Bounding box of the trajectory's vertices, rounded outward.
    pub fn around(traj: &Trajectory, dims: GridDims) -> Self {
        let ((r0, c0), (r1, c1)) = traj.bbox(dims);
        Self {
            top: r0.floor() as usize,
            left: c0.floor() as usize,
            bottom: r1.ceil() as usize,
            right: c1.ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Distance-aware control + movement energy against a distance field.
    Distance,
    /// Region-mass energy against a mask (box and mask baselines).
    Region,
}

/// The guidance target of one prompt token, pre-resampled to every
/// attention layer's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConstraint {
    pub token: usize,
    pub kind: TargetKind,
    /// `per_layer[k]` is the field (distances or region weights) on layer
    /// `k`'s grid.
    pub per_layer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerm {
    pub layer: usize,
    pub token: usize,
    pub e_control: f64,
    pub e_movement: f64,
    pub e_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_control: f64,
    pub e_movement: f64,
    pub e_total: f64,
    pub terms: Vec<EnergyTerm>,
}

fn check_constraints(attn: &[AttentionMap], constraints: &[TokenConstraint], layers: &[usize]) -> Result<()> {
    for &l in layers {
        if l >= attn.len() {
            return Err(Error::InvalidConfig(format!(
                "layer {l} not available ({} layers)",
                attn.len()
            )));
        }
    }
    let m = attn.first().map_or(0, |a| a.values.ncols());
    for (i, c) in constraints.iter().enumerate() {
        if c.token >= m {
            return Err(Error::TokenOutOfRange { token: c.token, len: m });
        }
        if constraints[..i].iter().any(|o| o.token == c.token) {
            return Err(Error::InvalidConfig(format!(
                "token {} constrained more than once",
                c.token
            )));
        }
        for &l in layers {
            match c.per_layer.get(l) {
                Some(f) if f.len() == attn[l].dims.len() => {}
                Some(f) => {
                    return Err(Error::Shape(format!(
                        "field for token {} on layer {l} has {} cells, layer has {}",
                        c.token,
                        f.len(),
                        attn[l].dims.len()
                    )))
                }
                None => return Err(Error::UnconstrainedToken { token: c.token }),
            }
        }
    }
    Ok(())
}

fn evaluate(
    attn: &[AttentionMap],
    constraints: &[TokenConstraint],
    layers: &[usize],
    cfg: &EnergyConfig,
    mut grads: Option<&mut [Array2<f64>]>,
) -> Result<EnergyBreakdown> {
    check_constraints(attn, constraints, layers)?;
    let mut out = EnergyBreakdown::default();
    let mut scratch = Vec::new();
    for &l in layers {
        let values = &attn[l].values;
        for c in constraints {
            let a = values.column(c.token);
            let field = &c.per_layer[l];
            let want_grad = grads.is_some();
            scratch.clear();
            scratch.resize(a.len(), 0.0);
            let g = want_grad.then_some(scratch.as_mut_slice());
            let (e_control, e_movement) = match c.kind {
                TargetKind::Distance => {
                    let ec = control_inner(a, field, cfg, g)?;
                    let g = want_grad.then_some(scratch.as_mut_slice());
                    let em = if cfg.lambda > 0.0 {
                        movement_inner(a, field, cfg, cfg.lambda, g)?
                    } else {
                        movement_inner(a, field, cfg, 0.0, None)?
                    };
                    (ec, em)
                }
                TargetKind::Region => (region_energy(a, field, cfg, g)?, 0.0),
            };
            let e_total = e_control + cfg.lambda * e_movement;
            if let Some(gs) = grads.as_deref_mut() {
                let mut col = gs[l].column_mut(c.token);
                for (dst, src) in col.iter_mut().zip(&scratch) {
                    *dst += src;
                }
            }
            out.e_control += e_control;
            out.e_movement += e_movement;
            out.e_total += e_total;
            out.terms.push(EnergyTerm {
                layer: l,
                token: c.token,
                e_control,
                e_movement,
                e_total,
            });
        }
    }
    Ok(out)
}

/// Sums per-(layer, token) energies over the layer set and constrained
/// tokens. Unconstrained tokens contribute nothing.
pub fn total_energy(
    attn: &[AttentionMap],
    constraints: &[TokenConstraint],
    layers: &[usize],
    cfg: &EnergyConfig,
) -> Result<EnergyBreakdown> {
    evaluate(attn, constraints, layers, cfg, None)
}

/// Analytic `∂E_total/∂A` for every layer (zero outside the layer set and
/// outside constrained columns), together with the energy itself.
pub fn energy_and_grad(
    attn: &[AttentionMap],
    constraints: &[TokenConstraint],
    layers: &[usize],
    cfg: &EnergyConfig,
) -> Result<(EnergyBreakdown, Vec<Array2<f64>>)> {
    let mut grads: Vec<Array2<f64>> = attn.iter().map(|a| Array2::zeros(a.values.dim())).collect();
    let breakdown = evaluate(attn, constraints, layers, cfg, Some(&mut grads))?;
    Ok((breakdown, grads))
}

pub fn energy_grad_wrt_attention(
    attn: &[AttentionMap],
    constraints: &[TokenConstraint],
    layers: &[usize],
    cfg: &EnergyConfig,
) -> Result<Vec<Array2<f64>>> {
    energy_and_grad(attn, constraints, layers, cfg).map(|(_, g)| g)
}

/// Baseline mask from an early attention column: keep cells at or above
/// `threshold · max`, then shift the mask so its centroid lands on the
/// trajectory's bounding-box center. Cells shifted off the grid are dropped.
pub fn prior_structure_mask(
    a: ArrayView1<'_, f64>,
    dims: GridDims,
    threshold: f64,
    traj: &Trajectory,
    token: usize,
) -> Result<CellSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
    }
    if a.len() != dims.len() {
        return Err(Error::Shape(format!("column of {} cells on {dims:?}", a.len())));
    }
    let max = a.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut mask = CellSet::new(dims);
    if max > 0.0 {
        for (i, &x) in a.iter().enumerate() {
            if x >= threshold * max {
                mask.insert(dims.cell(i));
            }
        }
    }
    let Some((cr, cc)) = mask.centroid() else {
        return Err(Error::UnusableMask { token });
    };
    let (tr, tc) = traj.bbox_center(dims);
    let shifted = mask.translated((tr - cr).round() as i64, (tc - cc).round() as i64);
    if shifted.is_empty() {
        return Err(Error::UnusableMask { token });
    }
    Ok(shifted)
}

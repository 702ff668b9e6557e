//! Guided sampling: a deterministic DDIM loop whose first `guided_steps`
//! steps each take `repeats_per_step` gradient steps on the latent,
//! `z ← z − σ_t²·η·∇_z Σ_layers Σ_tokens E`, before denoising.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::energy::{
    energy_and_grad, prior_structure_mask, total_energy, CellBox, EnergyBreakdown, EnergyConfig, TargetKind,
    TokenConstraint,
};
use crate::error::{Error, Result};
use crate::formats::trace::AttentionTrace;
use crate::geometry::{expand_trajectory_to_mask, resample_bilinear, CellSet, Trajectory};
use crate::metrics::{dtl, guidance_field, scaled_distance_field, segment_blobs, DtlReport, SegmentMode};
use crate::model::{AttentionMap, LatentState, ModelConfig, SandboxModel, TokenSet};
use crate::render::{render_scene, Render, RENDER_SCALE};
use crate::schedule::{build_schedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    ControlOnly,
    #[default]
    Full,
    PriorStructure,
    TrajectoryExpand,
    Box,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::None,
        Mode::ControlOnly,
        Mode::Full,
        Mode::PriorStructure,
        Mode::TrajectoryExpand,
        Mode::Box,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::ControlOnly => "control_only",
            Mode::Full => "full",
            Mode::PriorStructure => "prior_structure",
            Mode::TrajectoryExpand => "trajectory_expand",
            Mode::Box => "box",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub denom_floor: f64,
    pub guided_steps: usize,
    pub repeats_per_step: usize,
    /// Attention layers the energy is summed over; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub total_steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Dilation radius (latent cells) of the trajectory-expanding baseline.
    pub expand_radius: f64,
    /// Fraction of the column max kept by the prior-structure baseline.
    pub prior_threshold: f64,
    /// Unguided steps run before the prior-structure mask is extracted.
    pub prior_warmup_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 30.0,
            lambda: 10.0,
            epsilon: 1.0,
            denom_floor: 1e-8,
            guided_steps: 10,
            repeats_per_step: 5,
            layers: None,
            total_steps: 50,
            seed: 450,
            mode: Mode::Full,
            beta_start: 1e-4,
            beta_end: 0.08,
            expand_radius: 2.0,
            prior_threshold: 0.3,
            prior_warmup_steps: 5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta {} must be >= 0", self.eta)));
        }
        self.energy_config().validate()?;
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be >= 1".into()));
        }
        if self.guided_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "guided_steps {} exceeds total_steps {}",
                self.guided_steps, self.total_steps
            )));
        }
        if self.prior_warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig("prior_warmup_steps exceeds total_steps".into()));
        }
        if !(self.expand_radius >= 0.0) {
            return Err(Error::InvalidConfig("expand_radius must be >= 0".into()));
        }
        if !(self.prior_threshold > 0.0 && self.prior_threshold < 1.0) {
            return Err(Error::InvalidConfig("prior_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Energy settings for the active mode (`control_only` drops movement).
    pub fn energy_config(&self) -> EnergyConfig {
        EnergyConfig {
            lambda: if self.mode == Mode::ControlOnly { 0.0 } else { self.lambda },
            epsilon: self.epsilon,
            denom_floor: self.denom_floor,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.total_steps, self.beta_start, self.beta_end)
    }
}

/// Deterministic DDIM update from timestep `t` to `t − 1`.
pub fn ddim_step(schedule: &NoiseSchedule, z: &Array3<f64>, eps: &Array3<f64>, t: usize) -> Array3<f64> {
    let (a_t, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let x0 = (z - &(eps * (1.0 - a_t).sqrt())) / a_t.sqrt();
    x0 * a_prev.sqrt() + eps * (1.0 - a_prev).sqrt()
}

/// Plain reverse process with no guidance machinery at all.
pub fn sample_unguided(model: &SandboxModel, tokens: &TokenSet, cfg: &GuidanceConfig) -> Result<LatentState> {
    let schedule = cfg.schedule()?;
    let mut state = LatentState::noise(model.config(), cfg.seed, schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let out = model.denoise_step(&state, tokens)?;
        state = LatentState::new(ddim_step(&schedule, &state.z, &out.eps_hat, t), t - 1);
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct GuidanceStep {
    pub state: LatentState,
    /// Energy at the input latent.
    pub energy: EnergyBreakdown,
    pub grad_norm: f64,
}

/// One latent update `z ← z − σ²·η·∇_z E`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_update(
    model: &SandboxModel,
    state: &LatentState,
    tokens: &TokenSet,
    constraints: &[TokenConstraint],
    layers: &[usize],
    energy_cfg: &EnergyConfig,
    eta: f64,
    sigma: f64,
) -> Result<GuidanceStep> {
    let cache = model.forward(state, tokens)?;
    let maps = model.attention_maps(&cache);
    let (energy, grad_attn) = energy_and_grad(&maps, constraints, layers, energy_cfg)?;
    let grad = model.backward(&cache, tokens, &grad_attn)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || !energy.e_total.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            timestep: state.t,
            detail: format!("energy {} gradient norm {grad_norm}", energy.e_total),
        });
    }
    let step = sigma * sigma * eta;
    let z = &state.z - &(grad * step);
    let next = LatentState::new(z, state.t);
    if !next.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            timestep: state.t,
            detail: format!("non-finite latent after update (step size {step}, gradient norm {grad_norm})"),
        });
    }
    Ok(GuidanceStep {
        state: next,
        energy,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub sigma: f64,
    pub guided: bool,
    pub updates: usize,
    /// Energy before the first guidance update of this step.
    pub energy_before: Option<EnergyBreakdown>,
    /// Energy of the latent handed to the denoiser.
    pub energy: Option<EnergyBreakdown>,
    /// Updates after which the energy went up.
    pub overshoots: usize,
    pub max_grad_norm: f64,
    pub latent_norm: f64,
    pub events: Vec<String>,
}

/// What an observer sees after each step.
pub struct StepView<'a> {
    pub record: &'a StepRecord,
    /// Attention at the denoiser input of this step.
    pub attention: &'a [AttentionMap],
    /// Latent after the denoise step.
    pub latent: &'a LatentState,
    pub tokens: &'a TokenSet,
    pub model: &'a SandboxModel,
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub config: GuidanceConfig,
    pub model: ModelConfig,
    pub prompt: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
    pub steps: Vec<StepRecord>,
    pub notes: Vec<String>,
    pub render: Render,
    pub metrics: Option<DtlReport>,
    pub trace: AttentionTrace,
    pub final_latent: LatentState,
    pub wall_clock: Duration,
}

impl SampleResult {
    pub fn dtl(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.dtl)
    }
}

fn resampled(values: &[f64], model: &SandboxModel) -> Vec<Vec<f64>> {
    (0..model.layer_count())
        .map(|k| resample_bilinear(values, model.dims(), model.layer_dims(k)))
        .collect()
}

fn region(token: usize, cells: &CellSet, model: &SandboxModel) -> TokenConstraint {
    TokenConstraint {
        token,
        kind: TargetKind::Region,
        per_layer: resampled(&cells.indicator(), model),
    }
}

/// Distance constraints for every trajectory, resampled to each layer.
pub fn distance_constraints(model: &SandboxModel, trajectories: &[Trajectory]) -> Result<Vec<TokenConstraint>> {
    trajectories
        .iter()
        .map(|t| {
            let field = guidance_field(t, model.dims())?;
            Ok(TokenConstraint {
                token: t.token_index,
                kind: TargetKind::Distance,
                per_layer: resampled(&field.values, model),
            })
        })
        .collect()
}

pub fn check_trajectories(trajectories: &[Trajectory], tokens: usize) -> Result<()> {
    for (i, t) in trajectories.iter().enumerate() {
        t.validate()?;
        if t.token_index >= tokens {
            return Err(Error::TokenOutOfRange {
                token: t.token_index,
                len: tokens,
            });
        }
        if trajectories[..i].iter().any(|o| o.token_index == t.token_index) {
            return Err(Error::MalformedTrajectory(format!(
                "token {} has more than one trajectory; use multiple polylines instead",
                t.token_index
            )));
        }
    }
    Ok(())
}

/// Stepwise guided sampler; `guided_sample` drives it to completion.
pub struct Sampler<'a> {
    model: &'a SandboxModel,
    tokens: &'a TokenSet,
    cfg: GuidanceConfig,
    energy_cfg: EnergyConfig,
    schedule: NoiseSchedule,
    layers: Vec<usize>,
    /// Constraints the latent is optimized against.
    active: Vec<TokenConstraint>,
    /// Constraints the per-step energy log is computed against.
    logged: Vec<TokenConstraint>,
    notes: Vec<String>,
    state: LatentState,
    step: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(
        model: &'a SandboxModel,
        tokens: &'a TokenSet,
        trajectories: &[Trajectory],
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_trajectories(trajectories, tokens.len())?;
        let layers = match &cfg.layers {
            Some(l) => {
                if let Some(bad) = l.iter().find(|&&k| k >= model.layer_count()) {
                    return Err(Error::InvalidConfig(format!(
                        "layer {bad} not available ({} layers)",
                        model.layer_count()
                    )));
                }
                l.clone()
            }
            None => (0..model.layer_count()).collect(),
        };
        let schedule = cfg.schedule()?;
        let state = LatentState::noise(model.config(), cfg.seed, schedule.steps());
        let dims = model.dims();
        let mut notes = Vec::new();

        let distance = distance_constraints(model, trajectories)?;
        let active = match cfg.mode {
            Mode::None => Vec::new(),
            Mode::ControlOnly | Mode::Full => distance.clone(),
            Mode::TrajectoryExpand => trajectories
                .iter()
                .map(|t| Ok(region(t.token_index, &expand_trajectory_to_mask(t, dims, cfg.expand_radius)?, model)))
                .collect::<Result<_>>()?,
            Mode::Box => trajectories
                .iter()
                .map(|t| {
                    let b = CellBox::around(t, dims);
                    let mut cells = CellSet::new(dims);
                    for (i, &w) in b.indicator(dims).iter().enumerate() {
                        if w > 0.0 {
                            cells.insert(dims.cell(i));
                        }
                    }
                    region(t.token_index, &cells, model)
                })
                .collect(),
            Mode::PriorStructure => {
                let mut warm = state.clone();
                for t in ((schedule.steps() - cfg.prior_warmup_steps + 1)..=schedule.steps()).rev() {
                    let out = model.denoise_step(&warm, tokens)?;
                    warm = LatentState::new(ddim_step(&schedule, &warm.z, &out.eps_hat, t), t - 1);
                }
                let out = model.denoise_step(&warm, tokens)?;
                let last = out.attention.last().expect("at least one layer").upsampled(dims);
                let mut active = Vec::new();
                for t in trajectories {
                    match prior_structure_mask(last.column(t.token_index), dims, cfg.prior_threshold, t, t.token_index) {
                        Ok(mask) => active.push(region(t.token_index, &mask, model)),
                        Err(e @ Error::UnusableMask { .. }) => notes.push(e.to_string()),
                        Err(e) => return Err(e),
                    }
                }
                active
            }
        };
        let logged = match cfg.mode {
            Mode::None | Mode::ControlOnly | Mode::Full => distance,
            _ => active.clone(),
        };
        Ok(Self {
            model,
            tokens,
            energy_cfg: cfg.energy_config(),
            cfg: cfg.clone(),
            schedule,
            layers,
            active,
            logged,
            notes,
            state,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.steps()
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// Replaces the latent and step counter, e.g. to resume from a snapshot.
    pub fn resume_from(&mut self, state: LatentState, step: usize) {
        self.state = state;
        self.step = step;
    }

    /// Zeroes guidance for all remaining steps.
    pub fn stop_guidance(&mut self) {
        self.active.clear();
    }

    pub fn step(&mut self) -> Result<(StepRecord, Vec<AttentionMap>)> {
        let t = self.schedule.steps() - self.step;
        let sigma = self.schedule.sigma(t);
        let guided = self.step < self.cfg.guided_steps && !self.active.is_empty();
        let mut record = StepRecord {
            step: self.step,
            timestep: t,
            sigma,
            guided,
            updates: 0,
            energy_before: None,
            energy: None,
            overshoots: 0,
            max_grad_norm: 0.0,
            latent_norm: 0.0,
            events: Vec::new(),
        };
        if self.step < self.cfg.guided_steps && self.cfg.mode == Mode::PriorStructure {
            record.events.extend(self.notes.iter().cloned());
        }
        let mut previous: Option<f64> = None;
        if guided {
            for _ in 0..self.cfg.repeats_per_step {
                let update = guidance_update(
                    self.model,
                    &self.state,
                    self.tokens,
                    &self.active,
                    &self.layers,
                    &self.energy_cfg,
                    self.cfg.eta,
                    sigma,
                )
                .map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged {
                        step: self.step,
                        timestep: t,
                        detail,
                    },
                    other => other,
                })?;
                if previous.is_some_and(|p| update.energy.e_total > p) {
                    record.overshoots += 1;
                }
                previous = Some(update.energy.e_total);
                record.max_grad_norm = record.max_grad_norm.max(update.grad_norm);
                record.energy_before.get_or_insert(update.energy);
                record.updates += 1;
                self.state = update.state;
            }
        }

        let cache = self.model.forward(&self.state, self.tokens)?;
        let attention = self.model.attention_maps(&cache);
        if !self.logged.is_empty() {
            let e = total_energy(&attention, &self.logged, &self.layers, &self.energy_cfg)?;
            if !e.e_total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    timestep: t,
                    detail: "non-finite energy".into(),
                });
            }
            if guided && previous.is_some_and(|p| e.e_total > p) {
                record.overshoots += 1;
            }
            record.energy = Some(e);
        }
        if record.overshoots > 0 {
            record.events.push(format!("{} overshooting update(s)", record.overshoots));
        }
        let out = self.model.output(cache);
        let z = ddim_step(&self.schedule, &self.state.z, &out.eps_hat, t);
        self.state = LatentState::new(z, t - 1);
        if !self.state.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                timestep: t,
                detail: "non-finite latent after denoising".into(),
            });
        }
        record.latent_norm = self.state.norm();
        self.step += 1;
        Ok((record, attention))
    }
}

pub fn guided_sample(
    model: &SandboxModel,
    tokens: &TokenSet,
    trajectories: &[Trajectory],
    cfg: &GuidanceConfig,
) -> Result<SampleResult> {
    guided_sample_with(model, tokens, trajectories, cfg, |_| {})
}

/// Runs the full sampler, calling `observe` after every step.
pub fn guided_sample_with(
    model: &SandboxModel,
    tokens: &TokenSet,
    trajectories: &[Trajectory],
    cfg: &GuidanceConfig,
    mut observe: impl FnMut(StepView<'_>),
) -> Result<SampleResult> {
    let started = Instant::now();
    let mut sampler = Sampler::new(model, tokens, trajectories, cfg)?;
    let mut trace = AttentionTrace::new(model.dims(), tokens.len(), model.layer_count());
    let mut steps = Vec::with_capacity(cfg.total_steps);
    while !sampler.is_done() {
        let (record, attention) = sampler.step()?;
        trace.push_step(&attention)?;
        observe(StepView {
            record: &record,
            attention: &attention,
            latent: sampler.state(),
            tokens,
            model,
        });
        steps.push(record);
    }
    let final_latent = sampler.state().clone();
    let render = render_scene(model, &final_latent, tokens)?;
    let metrics = evaluate_dtl(&render, trajectories, model)?;
    Ok(SampleResult {
        config: cfg.clone(),
        model: *model.config(),
        prompt: tokens.tokens.clone(),
        trajectories: trajectories.to_vec(),
        steps,
        notes: sampler.notes().to_vec(),
        render,
        metrics,
        trace,
        final_latent,
        wall_clock: started.elapsed(),
    })
}

/// DTL of the rendered ground-truth masks against each trajectory, with
/// distances recomputed on the image grid.
pub fn evaluate_dtl(render: &Render, trajectories: &[Trajectory], model: &SandboxModel) -> Result<Option<DtlReport>> {
    if trajectories.is_empty() {
        return Ok(None);
    }
    let masks = segment_blobs(render, SegmentMode::GroundTruth);
    let mut picked = Vec::with_capacity(trajectories.len());
    let mut fields = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        picked.push(masks[t.token_index].clone());
        fields.push(scaled_distance_field(t, model.dims(), RENDER_SCALE)?);
    }
    dtl(&picked, &fields).map(Some)
}

//! Seeded scene suites and the variant/λ ablation runner.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Trajectory;
use crate::guidance::{guided_sample, GuidanceConfig, Mode};
use crate::model::{embed_tokens, ModelConfig, SandboxModel};
use crate::vocab::{FIRST_OBJECT, VOCAB};

/// One prompt with its per-token trajectories. Scene `k` of a run samples
/// from noise seed `cfg.seed + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub prompt: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
}

impl Scene {
    pub fn noise_seed(&self, base: u64) -> u64 {
        base.wrapping_add(self.index as u64)
    }
}

fn random_stroke(rng: &mut ChaCha8Rng, rows: (f64, f64), cols: (f64, f64)) -> Vec<[f64; 2]> {
    let center = [rng.gen_range(rows.0..rows.1), rng.gen_range(cols.0..cols.1)];
    let length = rng.gen_range(5.0..9.0);
    let angle = rng.gen_range(0.0..PI);
    let (dr, dc) = (angle.sin() * length / 2.0, angle.cos() * length / 2.0);
    match rng.gen_range(0..3) {
        // straight segment
        0 => vec![[center[0] - dr, center[1] - dc], [center[0] + dr, center[1] + dc]],
        // bent stroke with a kink at the middle
        1 => {
            let bend = rng.gen_range(-2.5..2.5);
            vec![
                [center[0] - dr, center[1] - dc],
                [center[0] + bend * angle.cos(), center[1] - bend * angle.sin()],
                [center[0] + dr, center[1] + dc],
            ]
        }
        // shallow arc
        _ => {
            let radius = length;
            let span = rng.gen_range(0.6..1.0);
            let start = rng.gen_range(0.0..2.0 * PI);
            let origin = [center[0] - radius * start.sin(), center[1] - radius * start.cos()];
            (0..5)
                .map(|k| {
                    let a = start + span * (k as f64 / 4.0 - 0.5);
                    [origin[0] + radius * a.sin(), origin[1] + radius * a.cos()]
                })
                .collect()
        }
    }
}

/// Two-object scenes on a `height × width` grid: a four-token prompt
/// `[context, object, context, object]` with a stroke for each object, the
/// first in the upper half and the second in the lower half.
pub fn scene_suite(count: usize, seed: u64, height: usize, width: usize) -> Vec<Scene> {
    let (h, w) = (height as f64, width as f64);
    (0..count)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
            let objects = VOCAB.len() as u32 - FIRST_OBJECT;
            let first = FIRST_OBJECT + rng.gen_range(0..objects);
            let mut second = FIRST_OBJECT + rng.gen_range(0..objects - 1);
            if second >= first {
                second += 1;
            }
            let prompt = vec![rng.gen_range(0..FIRST_OBJECT), first, rng.gen_range(0..FIRST_OBJECT), second];
            let upper = random_stroke(&mut rng, (0.2 * h, 0.4 * h), (0.3 * w, 0.7 * w));
            let lower = random_stroke(&mut rng, (0.6 * h, 0.8 * h), (0.3 * w, 0.7 * w));
            Scene {
                index,
                prompt,
                trajectories: vec![Trajectory::new(1, vec![upper]), Trajectory::new(3, vec![lower])],
            }
        })
        .collect()
}

/// A guidance configuration to evaluate, labelled for the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: Mode,
    pub lambda: Option<f64>,
}

impl Variant {
    pub fn mode(mode: Mode) -> Self {
        Self {
            name: mode.as_str().to_string(),
            mode,
            lambda: None,
        }
    }

    pub fn lambda(lambda: f64) -> Self {
        Self {
            name: format!("lambda={lambda}"),
            mode: Mode::Full,
            lambda: Some(lambda),
        }
    }

    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.mode,
            lambda: self.lambda.unwrap_or(base.lambda),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: Mode,
    pub lambda: f64,
    pub mean_dtl: f64,
    pub scenes: usize,
    /// Scenes whose run failed; they count as DTL 0.
    pub failures: usize,
    pub per_scene: Vec<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.row(name).map(|r| r.mean_dtl)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mode,lambda,mean_dtl,scenes,failures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, r.mode, r.lambda, r.mean_dtl, r.scenes, r.failures
            ));
        }
        out
    }
}

/// Evaluates every variant on every scene. Runs are independent, so they
/// are spread over `pool`; results are gathered in input order.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    scenes: &[Scene],
    variants: &[Variant],
    base: &GuidanceConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<AblationTable> {
    let model = SandboxModel::new(*model_cfg)?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..scenes.len()).map(move |s| (v, s)))
        .collect();
    let run = |&(v, s): &(usize, usize)| -> Result<std::result::Result<f64, String>> {
        let scene = &scenes[s];
        let mut cfg = variants[v].apply(base);
        cfg.seed = scene.noise_seed(base.seed);
        let tokens = embed_tokens(&scene.prompt, model_cfg.d_k, model_cfg.seed)?;
        Ok(match guided_sample(&model, &tokens, &scene.trajectories, &cfg) {
            Ok(r) => Ok(r.dtl().unwrap_or(0.0)),
            Err(e) => Err(format!("scene {}: {e}", scene.index)),
        })
    };
    let outcomes: Vec<_> = match pool {
        Some(p) => p.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?,
        None => jobs.iter().map(run).collect::<Result<Vec<_>>>()?,
    };
    let rows = variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let chunk = &outcomes[v * scenes.len()..(v + 1) * scenes.len()];
            let per_scene: Vec<f64> = chunk.iter().map(|o| *o.as_ref().unwrap_or(&0.0)).collect();
            let errors: Vec<String> = chunk.iter().filter_map(|o| o.as_ref().err().cloned()).collect();
            AblationRow {
                variant: variant.name.clone(),
                mode: variant.mode,
                lambda: variant.apply(base).energy_config().lambda,
                mean_dtl: per_scene.iter().sum::<f64>() / per_scene.len().max(1) as f64,
                scenes: per_scene.len(),
                failures: errors.len(),
                per_scene,
                errors,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

pub fn lambda_variants(values: &[f64]) -> Vec<Variant> {
    values.iter().map(|&l| Variant::lambda(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_deterministic_and_in_bounds() {
        let a = scene_suite(20, 7, 16, 16);
        assert_eq!(a, scene_suite(20, 7, 16, 16));
        assert_ne!(a[0], a[1]);
        for s in &a {
            assert_eq!(s.prompt.len(), 4);
            assert_ne!(s.prompt[1], s.prompt[3]);
            for t in &s.trajectories {
                t.validate().unwrap();
            }
        }
    }

    #[test]
    fn single_scene_single_variant_table() {
        let scenes = scene_suite(1, 0, 16, 16);
        let base = GuidanceConfig {
            total_steps: 12,
            guided_steps: 3,
            ..Default::default()
        };
        let t = run_ablation(&ModelConfig::default(), &scenes, &[Variant::mode(Mode::Full)], &base, None).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].per_scene.len(), 1);
        assert_eq!(t.to_csv().lines().count(), 2);
    }

    #[test]
    fn control_only_reports_zero_lambda() {
        let v = Variant::mode(Mode::ControlOnly);
        assert_eq!(v.apply(&GuidanceConfig::default()).energy_config().lambda, 0.0);
    }
}

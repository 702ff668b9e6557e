//! JSON bodies and SSE payloads shared with the browser client.

use serde::{Deserialize, Serialize};
use trajguide_core::formats::{RunConfig, RunMetrics};
use trajguide_core::metrics::InstanceDtl;
use trajguide_core::{GridDims, GuidanceConfig, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub revision: u64,
    /// Latent grid the trajectories live on.
    pub grid: GridDims,
    /// Image pixels per grid cell.
    pub render_scale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoedCells {
    pub token_index: usize,
    pub cells: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoriesSet {
    pub revision: u64,
    pub grid: GridDims,
    pub cells: Vec<EchoedCells>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub e_control: f64,
    pub e_movement: f64,
    pub e_total: f64,
}

/// Per-token attention of the finest layer on the latent grid, scaled so
/// the frame's maximum is white.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub token_index: usize,
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: usize,
    pub timestep: usize,
    pub sigma: f64,
    pub guided: bool,
    pub updates: usize,
    pub energy: Option<EnergySummary>,
    pub overshoots: usize,
    pub latent_norm: f64,
    pub events: Vec<String>,
    pub heatmaps: Vec<Heatmap>,
    /// Render of the current latent, every fifth step unless the client is
    /// falling behind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_png_base64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneEvent {
    pub revision: u64,
    pub steps: usize,
    pub dtl: Option<f64>,
    pub instances: Vec<InstanceDtl>,
    pub image_png_base64: String,
    pub masks_png_base64: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEvent {
    pub error: String,
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    /// Top-level config field the error is about, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Trajectory revision the run used.
    pub revision: u64,
    pub guidance: GuidanceConfig,
    pub metrics: RunMetrics,
    pub energies: Vec<Option<EnergySummary>>,
    /// Run directory and the files in it, when the service keeps artifacts.
    pub artifact_dir: Option<String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBody {
    pub state: SessionState,
    #[serde(flatten)]
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub state: SessionState,
    pub revision: u64,
    pub config: RunConfig,
    pub has_result: bool,
    pub last_error: Option<FailedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub words: Vec<String>,
    pub first_object: u32,
    pub grid: GridDims,
    pub render_scale: usize,
}

//! Versioned JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ablation::{scene_suite, Scene};
use crate::error::{Error, Result};
use crate::geometry::Trajectory;
use crate::guidance::{check_trajectories, GuidanceConfig};
use crate::model::ModelConfig;
use crate::vocab::VOCAB;

pub const SCHEMA_VERSION: u32 = 1;

/// Seeded scene suite used by `ablate` and `sweep-lambda` instead of the
/// config's own prompt and trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub prompt: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(prompt: Vec<u32>, trajectories: Vec<Trajectory>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            guidance: GuidanceConfig::default(),
            prompt,
            trajectories,
            suite: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnknownSchema(self.schema_version));
        }
        self.model.validate()?;
        self.guidance.validate()?;
        if self.prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if let Some(&bad) = self.prompt.iter().find(|&&id| id as usize >= VOCAB.len()) {
            return Err(Error::InvalidConfig(format!(
                "prompt: token id {bad} not in the {}-word vocabulary",
                VOCAB.len()
            )));
        }
        if let Some(s) = self.suite {
            if s.count == 0 {
                return Err(Error::InvalidConfig("suite.count must be >= 1".into()));
            }
        }
        check_trajectories(&self.trajectories, self.prompt.len()).map_err(|e| match e {
            e @ (Error::TokenOutOfRange { .. } | Error::MalformedTrajectory(_)) => e,
            other => Error::MalformedTrajectory(other.to_string()),
        })
    }

    /// The scenes this config evaluates: its suite if one is set, otherwise
    /// the single scene given by its prompt and trajectories.
    pub fn scenes(&self) -> Vec<Scene> {
        match self.suite {
            Some(s) => scene_suite(s.count, s.seed, self.model.height, self.model.width),
            None => vec![Scene {
                index: 0,
                prompt: self.prompt.clone(),
                trajectories: self.trajectories.clone(),
            }],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// "photo of cat and dog": the cat follows an arc across the upper half,
/// the dog a bent stroke across the lower half.
pub fn demo_config() -> RunConfig {
    RunConfig::new(
        vec![6, 7, 10, 2, 11],
        vec![
            Trajectory::new(2, vec![vec![[5.0, 3.0], [3.5, 6.0], [3.0, 9.0], [4.5, 12.0]]]),
            Trajectory::new(4, vec![vec![[12.0, 3.0], [10.5, 8.0], [12.0, 12.5]]]),
        ],
    )
}

fn field<T: DeserializeOwned + Default>(obj: &Map<String, Value>, name: &str) -> Result<T> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => T::deserialize(v).map_err(|e| Error::InvalidConfig(format!("{name}: {e}"))),
    }
}

/// Parses and validates a config from JSON text, filling defaults. Each
/// top-level field is decoded separately so errors name the field.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(Error::InvalidConfig("config must be a JSON object".into()));
    };
    let schema_version = match obj.get("schema_version") {
        None => SCHEMA_VERSION,
        Some(v) => match v.as_u64() {
            Some(n) if n <= u32::MAX as u64 => n as u32,
            _ => return Err(Error::InvalidConfig(format!("schema_version: expected an integer, got {v}"))),
        },
    };
    if schema_version != SCHEMA_VERSION {
        return Err(Error::UnknownSchema(schema_version));
    }
    let trajectories = match obj.get("trajectories") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => parse_trajectories(v)?,
    };
    let cfg = RunConfig {
        schema_version,
        model: field(&obj, "model")?,
        guidance: field(&obj, "guidance")?,
        prompt: field(&obj, "prompt")?,
        trajectories,
        suite: field(&obj, "suite")?,
        output_dir: field(&obj, "output_dir")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Decodes a JSON trajectory list; shape errors are malformed trajectories.
pub fn parse_trajectories(value: &Value) -> Result<Vec<Trajectory>> {
    let list: Vec<Trajectory> =
        Vec::deserialize(value).map_err(|e| Error::MalformedTrajectory(format!("trajectories: {e}")))?;
    for t in &list {
        t.validate()
            .map_err(|e| Error::MalformedTrajectory(format!("token {}: {e}", t.token_index)))?;
    }
    Ok(list)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn save_run_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_json()).map_err(|e| Error::io(path, e))
}

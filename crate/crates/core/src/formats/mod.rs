//! On-disk formats: run configs, run directories and attention traces.

pub mod artifacts;
pub mod config;
pub mod trace;

pub use artifacts::{write_run_artifacts, Manifest, ManifestEntry, RunMetrics};
pub use config::{demo_config, load_run_config, parse_run_config, save_run_config, RunConfig, SuiteSpec};
pub use trace::{trace_roundtrip, AttentionTrace};

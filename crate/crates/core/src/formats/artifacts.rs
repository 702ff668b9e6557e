//! Run directories: image, masks, metrics, per-step energies, config echo
//! and a manifest of content hashes.
//!
//! Nothing time-dependent is written, so identical runs produce identical
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageEncoder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::config::{RunConfig, SCHEMA_VERSION};
use crate::geometry::{CellSet, GridDims};
use crate::guidance::SampleResult;
use crate::metrics::InstanceDtl;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// Sorted by file name.
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, file: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.file == file)
    }

    pub fn masks(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.files.iter().filter(|e| e.file.starts_with("mask_"))
    }
}

/// `metrics.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dtl: Option<f64>,
    pub instances: Vec<InstanceDtl>,
    pub mode: String,
    pub steps: usize,
    pub final_energy: Option<f64>,
    pub overshoots: usize,
    pub notes: Vec<String>,
}

impl RunMetrics {
    pub fn from_result(result: &SampleResult) -> Self {
        Self {
            dtl: result.dtl(),
            instances: result.metrics.as_ref().map(|m| m.instances.clone()).unwrap_or_default(),
            mode: result.config.mode.to_string(),
            steps: result.steps.len(),
            final_energy: result.steps.last().and_then(|s| s.energy.as_ref()).map(|e| e.e_total),
            overshoots: result.steps.iter().map(|s| s.overshoots).sum(),
            notes: result.notes.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Config echo of a finished run. The output directory is left out so runs
/// written to different places hash the same.
pub fn config_echo(result: &SampleResult) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        model: result.model,
        guidance: result.config.clone(),
        prompt: result.prompt.clone(),
        trajectories: result.trajectories.clone(),
        suite: None,
        output_dir: None,
    }
}

pub fn encode_png(dims: GridDims, gray: &[u8]) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(dims.width as u32, dims.height as u32, gray.to_vec())
        .ok_or_else(|| Error::Image(format!("{} bytes for a {dims:?} image", gray.len())))?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn mask_png(mask: &CellSet) -> Result<Vec<u8>> {
    let gray: Vec<u8> = mask.indicator().iter().map(|&x| if x > 0.0 { 255 } else { 0 }).collect();
    encode_png(mask.dims, &gray)
}

pub fn energies_csv(result: &SampleResult) -> String {
    let mut out = String::from(
        "step,timestep,sigma,guided,updates,e_control,e_movement,e_total,overshoots,max_grad_norm,latent_norm\n",
    );
    for s in &result.steps {
        let (ec, em, et) = match &s.energy {
            Some(e) => (e.e_control.to_string(), e.e_movement.to_string(), e.e_total.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{ec},{em},{et},{},{},{}\n",
            s.step, s.timestep, s.sigma, s.guided, s.updates, s.overshoots, s.max_grad_norm, s.latent_norm
        ));
    }
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8], entries: &mut Vec<ManifestEntry>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    entries.push(ManifestEntry {
        file: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

/// Writes the run directory and returns its manifest (also written as
/// `manifest.json`). With `with_trace` the attention trace is stored as
/// `trace.atrc`.
pub fn write_run_artifacts(result: &SampleResult, dir: &Path, with_trace: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let echo = serde_json::to_string_pretty(&config_echo(result)).expect("config serializes");
    write(dir, "config.json", echo.as_bytes(), &mut files)?;
    let image = &result.render.image;
    write(dir, "image.png", &encode_png(image.dims, &image.to_gray8())?, &mut files)?;
    for (i, mask) in result.render.masks.iter().enumerate() {
        write(dir, &format!("mask_{i}.png"), &mask_png(&mask.cells)?, &mut files)?;
    }
    let metrics = serde_json::to_string_pretty(&RunMetrics::from_result(result)).expect("metrics serialize");
    write(dir, "metrics.json", metrics.as_bytes(), &mut files)?;
    write(dir, "energies.csv", energies_csv(result).as_bytes(), &mut files)?;
    if with_trace {
        write(dir, "trace.atrc", &result.trace.to_bytes(), &mut files)?;
    }
    files.sort_by(|a, b| a.file.cmp(&b.file));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

/// Files whose on-disk hash no longer matches the manifest.
pub fn verify_manifest(dir: &Path, manifest: &Manifest) -> Result<Vec<PathBuf>> {
    let mut bad = Vec::new();
    for e in &manifest.files {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            bad.push(path);
        }
    }
    Ok(bad)
}

//! Run manifests: everything needed to reproduce a run, written into the
//! output directory before any long computation starts and finalized with
//! the elapsed wall-clock time afterwards.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lovis_core::config::Config;
use lovis_core::error::Result;
use serde::Serialize;

#[derive(Serialize)]
pub struct DatasetRef {
    pub dir: String,
    /// Content hash over the four dataset files.
    pub fingerprint: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Full configuration in the config-file syntax; parseable as-is.
    pub config: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    /// None until the run finishes.
    pub wall_clock_seconds: Option<f64>,
    #[serde(skip)]
    path: PathBuf,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Config, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config: cfg.canonical(),
            seed: cfg.seed,
            dataset: None,
            outputs: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_seconds: None,
            path: out_dir.join("run_manifest.json"),
            started: None,
        }
    }

    pub fn dataset(mut self, dir: &Path, fingerprint: u64) -> Self {
        self.dataset = Some(DatasetRef {
            dir: dir.display().to_string(),
            fingerprint: format!("{fingerprint:016x}"),
        });
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Write the manifest and start the wall clock.
    pub fn begin(mut self) -> Result<Self> {
        self.started = Some(Instant::now());
        self.write()?;
        Ok(self)
    }

    /// Rewrite the manifest with the elapsed time filled in.
    pub fn finish(mut self) -> Result<()> {
        if let Some(t) = self.started {
            self.wall_clock_seconds = Some(t.elapsed().as_secs_f64());
        }
        self.write()
    }

    fn write(&self) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&self.path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

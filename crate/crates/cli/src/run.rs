use std::path::{Path, PathBuf};
use std::time::Instant;

use fastbvp_core::{Error, Result};
use serde::Serialize;

pub const RUN_FILE: &str = "run.json";

/// Record written next to the outputs of every command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

pub struct RunRecorder {
    manifest: RunManifest,
    start: Instant,
}

impl RunRecorder {
    pub fn new(command: &str, seed: Option<u64>, threads: Option<usize>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                config_paths: Vec::new(),
                seed,
                threads,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                wall_clock_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, p: Option<&Path>) {
        if let Some(p) = p {
            self.manifest.config_paths.push(p.to_path_buf());
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let path = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliResult;

pub const MANIFEST_VERSION: u32 = 1;

/// Record of one command invocation. `args` alone re-executes the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub label: Option<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub(crate) struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            manifest: RunManifest {
                format_version: MANIFEST_VERSION,
                command: command.to_string(),
                args: args.to_vec(),
                label: None,
                config: Value::Null,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_clock_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn label(&mut self, label: &str) -> &mut Self {
        self.manifest.label = Some(label.to_string());
        self
    }

    pub fn config(&mut self, config: impl Serialize) -> CliResult<&mut Self> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest
            .inputs
            .insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    pub fn write(mut self, path: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowcast::dataio::write_json;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigSource};
use crate::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
const RUN_SCHEMA_VERSION: u32 = 1;

/// Record of one command invocation; the only artifact that carries wall-clock timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub config_source: ConfigSource,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub checkpoints: BTreeMap<String, String>,
    pub results: BTreeMap<String, serde_json::Value>,
    pub timings_seconds: BTreeMap<String, f64>,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn new(command: &str, args: &[String], config: &Config, source: &ConfigSource) -> Self {
        let seeds = BTreeMap::from([
            ("solver".to_string(), config.solver.seed),
            ("rom".to_string(), config.rom.seed),
            ("backbone".to_string(), config.backbone.seed),
            ("processor".to_string(), config.processor.seed),
        ]);
        Self {
            manifest: RunManifest {
                schema_version: RUN_SCHEMA_VERSION,
                command: command.to_string(),
                args: args.to_vec(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_source: source.clone(),
                config: config.clone(),
                seeds,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                checkpoints: BTreeMap::new(),
                results: BTreeMap::new(),
                timings_seconds: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.into(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.manifest.outputs.insert(name.into(), path.to_path_buf());
    }

    pub fn checkpoint(&mut self, name: &str, checksum: String) {
        self.manifest.checkpoints.insert(name.into(), checksum);
    }

    pub fn result(&mut self, name: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.manifest.results.insert(name.into(), v);
    }

    /// Run `f` and record its duration under `name`.
    pub fn timed<R>(&mut self, name: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.manifest
            .timings_seconds
            .insert(name.into(), t.elapsed().as_secs_f64());
        r
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.manifest
            .timings_seconds
            .insert("total".into(), self.started.elapsed().as_secs_f64());
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join(RUN_MANIFEST_FILE), &self.manifest)?;
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use flowcast::backbone::BackboneSpec;
use flowcast::processor::ProcessorConfig;
use flowcast::rom::RomConfig;
use flowcast::spectral::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_ENV: &str = "FLOWCAST_CONFIG";
pub const DESK_PROFILE: &str = include_str!("../../../configs/desk.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Root for outputs whose location is not given on the command line.
    pub run_dir: PathBuf,
    pub train_fraction: f64,
    /// Overrides the solver-derived scenario tag.
    pub scenario: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/desk"),
            train_fraction: 0.9,
            scenario: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Persistence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub horizon: usize,
    pub context_pairs: usize,
    pub baseline: Option<Baseline>,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizon: 40,
            context_pairs: 0,
            baseline: None,
            plots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub precision: Precision,
    pub solver: SolverConfig,
    pub data: DataSection,
    pub rom: RomConfig,
    pub backbone: BackboneSpec,
    pub processor: ProcessorConfig,
    pub eval: EvalSection,
}

/// Where the configuration came from, for the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `dotted.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("invalid --set key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("--set {key}: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Read the configuration file (flag, then environment, then the built-in desk profile) and apply overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(Config, ConfigSource), CliError> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let text = match &path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?,
        None => DESK_PROFILE.to_string(),
    };
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: Config = doc.try_into().map_err(|e| CliError::usage(format!("config: {e}")))?;
    config.solver.validate()?;
    config.rom.validate()?;
    config.backbone.validate()?;
    config.processor.validate()?;
    if !(config.data.train_fraction > 0.0 && config.data.train_fraction < 1.0) {
        return Err(CliError::usage("data.train_fraction must lie in (0, 1)"));
    }
    Ok((
        config,
        ConfigSource {
            path,
            overrides: overrides.to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_parses() {
        let (c, _) = load(None, &[]).unwrap();
        assert_eq!(c.solver.n_out, 64);
        assert_eq!(c.rom.latent_dim, 32);
        assert_eq!(c.backbone.d_embed, 256);
        assert_eq!((c.processor.window, c.processor.patch_len), (20, 5));
        assert_eq!(c.rom.lambda, 1e-4);
        assert_eq!((c.rom.epochs, c.processor.epochs), (50, 50));
        assert_eq!((c.rom.batch_size, c.processor.batch_size), (128, 128));
    }

    #[test]
    fn overrides_are_typed() {
        let (c, src) = load(
            None,
            &[
                "solver.seed=9".into(),
                "rom.encoder_channels=[8, 16]".into(),
                "data.scenario=custom".into(),
                "precision=\"f64\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.solver.seed, 9);
        assert_eq!(c.rom.encoder_channels, vec![8, 16]);
        assert_eq!(c.data.scenario.as_deref(), Some("custom"));
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(src.overrides.len(), 4);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(load(None, &["solver.seed".into()]).is_err());
        assert!(load(None, &["rom.no_such_key=1".into()]).is_err());
        assert!(load(None, &["solver.seed.x=1".into()]).is_err());
        assert!(load(None, &["processor.window=3".into()]).is_err());
    }
}

//! Run configuration: a TOML file with one table per command, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use scenflow_core::cvae::{CvaeConfig, VaeTrainConfig};
use scenflow_core::flow::{FlowModelConfig, FlowTrainConfig};
use scenflow_core::metrics::MetricsConfig;
use scenflow_core::scene::ManeuverLabel;
use scenflow_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub synth: SynthSection,
    pub train_vae: VaeSection,
    pub train_flow: FlowSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            synth: SynthSection::default(),
            train_vae: VaeSection::default(),
            train_flow: FlowSection::default(),
            generate: GenerateSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub n_nominal: usize,
    pub n_aggressive: usize,
    pub n_tuned: usize,
    pub n_pseudo_real: usize,
    pub scenario: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("data"),
            seed: 0,
            n_nominal: 50,
            n_aggressive: 50,
            n_tuned: 50,
            n_pseudo_real: 50,
            scenario: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    /// Scenario files pooled into the training corpus.
    pub pools: Vec<PathBuf>,
    pub out_dir: PathBuf,
    /// Parameter initialization seed.
    pub init_seed: u64,
    pub model: CvaeConfig,
    pub train: VaeTrainConfig,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            pools: vec![],
            out_dir: PathBuf::from("runs/vae"),
            init_seed: 0,
            model: CvaeConfig::default(),
            train: VaeTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub vae_checkpoint: PathBuf,
    pub sim_pools: Vec<PathBuf>,
    pub real_pools: Vec<PathBuf>,
    pub alpha_real: f64,
    pub upsample_real: usize,
    /// Seed of the sim/real mixing stream.
    pub mix_seed: u64,
    pub out_dir: PathBuf,
    pub model: FlowModelConfig,
    pub train: FlowTrainConfig,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            vae_checkpoint: PathBuf::from("runs/vae/vae.ckpt"),
            sim_pools: vec![],
            real_pools: vec![],
            alpha_real: 0.5,
            upsample_real: 1,
            mix_seed: 0,
            out_dir: PathBuf::from("runs/flow"),
            model: FlowModelConfig::default(),
            train: FlowTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub vae_checkpoint: PathBuf,
    /// Required whenever the grid holds a `t_end` above zero.
    pub flow_checkpoint: Option<PathBuf>,
    pub input: PathBuf,
    pub out: PathBuf,
    pub t_end: Vec<f64>,
    /// Conditioning labels. Empty means each scenario's own label for a
    /// conditional flow and no label otherwise.
    pub labels: Vec<ManeuverLabel>,
    pub n_sample_steps: usize,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            vae_checkpoint: PathBuf::from("runs/vae/vae.ckpt"),
            flow_checkpoint: Some(PathBuf::from("runs/flow/flow.ckpt")),
            input: PathBuf::from("data/pseudo_real.jsonl"),
            out: PathBuf::from("runs/rollouts.jsonl"),
            t_end: vec![1.0],
            labels: vec![],
            n_sample_steps: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub rollouts: PathBuf,
    pub reference: PathBuf,
    /// Ground truth matched to rollouts by parent scenario id.
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
    pub by_label: bool,
    pub by_t_end: bool,
    pub metrics: MetricsConfig,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            rollouts: PathBuf::from("runs/rollouts.jsonl"),
            reference: PathBuf::from("data/pseudo_real.jsonl"),
            truth: None,
            out: PathBuf::from("runs/report.json"),
            by_label: true,
            by_t_end: true,
            metrics: MetricsConfig::default(),
        }
    }
}

/// Reads `path` (or starts from defaults), applies `key=value` overrides in
/// order, and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in overrides {
        set_path(&mut root, key, value.clone())?;
    }
    let cfg: RunConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare string.
pub fn parse_override(s: &str) -> std::result::Result<(String, toml::Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

pub fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

pub fn paths_value(ps: &[PathBuf]) -> toml::Value {
    toml::Value::Array(ps.iter().map(|p| path_value(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let o = vec![
            parse_override("train_flow.alpha_real=0.4").unwrap(),
            parse_override("synth.out_dir=pools").unwrap(),
            parse_override("synth.scenario.dt=0.2").unwrap(),
        ];
        let cfg = resolve(None, &o).unwrap();
        assert_eq!(cfg.train_flow.alpha_real, 0.4);
        assert_eq!(cfg.synth.out_dir, PathBuf::from("pools"));
        assert_eq!(cfg.synth.scenario.dt, 0.2);
        assert!(resolve(None, &[parse_override("synth.bogus=1").unwrap()]).is_err());
        assert!(resolve(None, &[parse_override("schema_version=9").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        assert_eq!(resolve(Some(&path), &[]).unwrap(), cfg);
    }
}

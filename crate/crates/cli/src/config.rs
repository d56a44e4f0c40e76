//! Experiment configuration: TOML on disk, `KEY=VALUE` overrides on top.

use std::path::{Path, PathBuf};

use phwm_core::ac::AcConfig;
use phwm_core::energy::{EnergyConfig, EnergyTrainConfig};
use phwm_core::phcore::PhConfig;
use phwm_core::rssm::RssmConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub schedule: Schedule,
    pub rssm: RssmConfig,
    pub ph: PhSection,
    pub energy: EnergySection,
    pub ac: AcConfig,
    pub constraints: ConstraintSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "pendulum".into(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs/default"),
            schedule: Schedule::default(),
            rssm: RssmConfig::default(),
            ph: PhSection::default(),
            energy: EnergySection::default(),
            ac: AcConfig::default(),
            constraints: ConstraintSection::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// World-model (and unconstrained actor-critic) updates.
    pub stage1_steps: u64,
    /// Constrained actor-critic updates on frozen models.
    pub stage2_steps: u64,
    /// Random-action episodes collected before training.
    pub seed_episodes: usize,
    pub episode_steps: usize,
    /// Collect one policy episode every this many updates (0 = never).
    pub collect_every: u64,
    /// Actor-critic update every this many world-model updates in stage 1.
    pub ac_every: u64,
    /// Imagination start states drawn per actor-critic update.
    pub ac_starts: usize,
    /// Longest hold of a random seed action, in steps.
    pub random_hold: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1_steps: 2000,
            stage2_steps: 500,
            seed_episodes: 10,
            episode_steps: 200,
            collect_every: 100,
            ac_every: 1,
            ac_starts: 64,
            random_hold: 10,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhSection {
    pub enabled: bool,
    pub lambda_max: f64,
    /// Fractions of `stage1_steps`.
    pub warmup_frac: f64,
    pub ramp_end_frac: f64,
    /// Rows of `h` treated as physical; 0 means the first half.
    pub split_index: usize,
    pub lr: f64,
    /// Integration step; 0 means the environment control interval.
    pub dt: f64,
    pub horizon: usize,
    pub structure: PhConfig,
}

impl Default for PhSection {
    fn default() -> Self {
        PhSection {
            enabled: true,
            lambda_max: 1.0,
            warmup_frac: 0.1,
            ramp_end_frac: 0.5,
            split_index: 0,
            lr: 1e-3,
            dt: 0.0,
            horizon: 1,
            structure: PhConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub model: EnergyConfig,
    pub train: EnergyTrainConfig,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection { model: EnergyConfig::default(), train: EnergyTrainConfig { epochs: 10, ..Default::default() } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintSource {
    /// Replayed kinematic windows with fresh policy actions.
    Replay,
    /// Kinematics decoded from imagined latents.
    Imagined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSection {
    pub enabled: bool,
    pub energy: bool,
    pub smooth: bool,
    pub eta_lambda: f64,
    /// Quantile of the unconstrained policy's batch constraint values used as `ε`.
    pub percentile: f64,
    /// Constraint batches evaluated to calibrate `ε`.
    pub calibration_batches: usize,
    /// Divide each constraint by its mean magnitude at calibration, so
    /// `eta_lambda` does not depend on energy units.
    pub normalize: bool,
    pub batch_size: usize,
    /// Windows are drawn from this many newest episodes.
    pub recent_episodes: usize,
    pub source: ConstraintSource,
    /// Episodes collected during stage 2 (one every this many updates).
    pub collect_every: u64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        ConstraintSection {
            enabled: true,
            energy: true,
            smooth: true,
            eta_lambda: 1e-2,
            percentile: 0.6,
            calibration_batches: 16,
            normalize: true,
            batch_size: 64,
            recent_episodes: 5,
            source: ConstraintSource::Replay,
            collect_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 10, steps: 200, alpha: 1.0, beta: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Seed episodes are read from this directory when set.
    pub dataset: Option<PathBuf>,
    pub episodes: usize,
    pub steps: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dataset: None, episodes: 10, steps: 200 }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults when `None`) and applies the overrides in
    /// order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        phwm_core::envsim::EnvSpec::by_name(&self.env).map_err(|e| CliError::Config(e.to_string()))?;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.schedule.episode_steps < self.rssm.seq_len {
            return bad("schedule.episode_steps must be at least rssm.seq_len");
        }
        if self.ac.horizon < 2 {
            return bad("ac.horizon must be at least 2");
        }
        if self.constraints.calibration_batches == 0 {
            return bad("constraints.calibration_batches must be positive");
        }
        if !(0.0..=1.0).contains(&self.constraints.percentile) {
            return bad("constraints.percentile must lie in [0, 1]");
        }
        if self.constraints.eta_lambda < 0.0 {
            return bad("constraints.eta_lambda must be nonnegative");
        }
        if self.ph.enabled {
            let phys = if self.ph.split_index == 0 { self.rssm.deter.div_ceil(2) } else { self.ph.split_index };
            if phys >= self.rssm.deter || self.ph.structure.dim > phys {
                return bad("ph.structure.dim must not exceed the physical latent size (ph.split_index, default rssm.deter / 2)");
            }
        }
        if self.eval.steps < 2 || self.eval.episodes == 0 {
            return bad("eval needs at least one episode of two steps");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `a.b.c=value`; the value is parsed as a TOML literal and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

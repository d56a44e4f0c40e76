//! Command implementations over the on-disk run layout:
//!
//! ```text
//! <out>/seed_<n>/config.toml     resolved config
//!               latest.json     rolling checkpoint
//!               stage1.json     after world/energy training
//!               stage2.json     after constrained fine-tuning
//!               stage1.csv stage2.csv energy_loss.csv
//!               manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use phwm_core::envsim::{relative_change, EnvSpec};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{file_sha256, generate_dataset, read_json, write_json, DatasetManifest};
use crate::error::{CliError, CliResult};
use crate::eval::{evaluate, EvalReport};
use crate::pipeline::{
    init_state, run_energy_phase, run_stage1, run_stage2, Phase, RunState, ENERGY_HEADER, STAGE1_HEADER, STAGE2_HEADER,
};
use crate::plot::{line_plot, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, CheckpointEntry>,
    pub metrics: BTreeMap<String, String>,
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut s = String::with_capacity(header.len() + rows.len() * 64);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn load_state(path: &Path, cfg: &ExperimentConfig) -> CliResult<RunState> {
    let state: RunState = read_json(path)?;
    state.check_compatible(cfg)?;
    Ok(state)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn save(&mut self, state: &RunState, name: Option<&str>) -> CliResult<()> {
        write_text(&self.dir.join("stage1.csv"), &csv(STAGE1_HEADER, &state.stage1_log))?;
        write_text(&self.dir.join("stage2.csv"), &csv(STAGE2_HEADER, &state.stage2_log))?;
        write_text(&self.dir.join("energy_loss.csv"), &csv(ENERGY_HEADER, &state.energy_log))?;
        for m in ["stage1", "stage2", "energy_loss"] {
            self.manifest.metrics.insert(m.into(), format!("{m}.csv"));
        }
        write_json(&self.dir.join("latest.json"), state)?;
        if let Some(name) = name {
            let file = format!("{name}.json");
            fs::copy(self.dir.join("latest.json"), self.dir.join(&file)).map_err(|e| CliError::io(&self.dir, e))?;
            let sha = file_sha256(&self.dir.join(&file))?;
            self.manifest.checkpoints.insert(name.into(), CheckpointEntry { path: file, sha256: sha });
        }
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    /// Dumps the last good state next to the error for inspection.
    fn fail(&self, state: &RunState, err: CliError) -> CliError {
        let _ = write_json(&self.dir.join("diagnostics.json"), &serde_json::json!({ "error": err.to_string(), "phase": state.phase, "step": state.step }));
        let _ = write_json(&self.dir.join("diagnostics_state.json"), state);
        err
    }
}

/// Trains one seed. `halt_after` stops after that many updates in this
/// invocation (the rolling checkpoint allows `resume` to continue).
/// Returns true once the requested stages are complete.
pub fn train(
    cfg: &ExperimentConfig,
    seed: u64,
    stage: StageSel,
    out: &Path,
    resume: bool,
    halt_after: Option<u64>,
) -> CliResult<bool> {
    let dir = run_dir(out, seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let prior_manifest: Option<RunManifest> = read_json(&dir.join("manifest.json")).ok();
    let mut run = Run {
        dir: dir.clone(),
        manifest: RunManifest {
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            checkpoints: prior_manifest.map(|m| m.checkpoints).unwrap_or_default(),
            metrics: BTreeMap::new(),
        },
    };
    let latest = dir.join("latest.json");
    let mut state = if resume && latest.exists() {
        load_state(&latest, cfg)?
    } else if stage == StageSel::Two {
        let mut s = load_state(&dir.join("stage1.json"), cfg)?;
        if s.phase != Phase::Stage2 {
            return Err(CliError::Config("stage1.json is not a completed stage-1 checkpoint".into()));
        }
        s.dual = None;
        s
    } else {
        init_state(cfg, seed)?
    };
    let chunk = cfg.schedule.checkpoint_every.max(1);
    let mut left = halt_after;
    while state.phase == Phase::Stage1 {
        if left == Some(0) {
            run.save(&state, None)?;
            return Ok(false);
        }
        let budget = left.map_or(chunk, |l| l.min(chunk));
        match run_stage1(&mut state, cfg, Some(budget)) {
            Ok(used) => left = left.map(|l| l - used),
            Err(e) => return Err(run.fail(&state, e)),
        }
        run.save(&state, None)?;
    }
    if state.phase == Phase::Energy {
        if let Err(e) = run_energy_phase(&mut state, cfg) {
            return Err(run.fail(&state, e));
        }
        run.save(&state, Some("stage1"))?;
    }
    if stage == StageSel::One {
        return Ok(true);
    }
    while state.phase == Phase::Stage2 {
        if left == Some(0) {
            run.save(&state, None)?;
            return Ok(false);
        }
        let budget = left.map_or(chunk, |l| l.min(chunk));
        match run_stage2(&mut state, cfg, Some(budget)) {
            Ok(used) => left = left.map(|l| l - used),
            Err(e) => return Err(run.fail(&state, e)),
        }
        run.save(&state, None)?;
    }
    run.save(&state, Some("stage2"))?;
    Ok(true)
}

/// Evaluates a checkpoint and writes `report.json`, `energy.csv` and
/// `energy.svg` into `out`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> CliResult<EvalReport> {
    let state = load_state(checkpoint, cfg)?;
    let id = file_sha256(checkpoint)?;
    let ev = evaluate(&state, cfg, &id)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("report.json"), &ev.report)?;
    let energy_csv = ev.trace.to_csv();
    write_text(&out.join("energy.csv"), &energy_csv)?;
    let svg = line_plot(&Table::parse(&energy_csv)?, "t", &["h_t", "e_true"], "inferred vs true energy")?;
    write_text(&out.join("energy.svg"), &svg)?;
    Ok(ev.report)
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> CliResult<DatasetManifest> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    generate_dataset(&spec, dir, seed, cfg.data.episodes, cfg.data.steps, cfg.schedule.random_hold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub return_mean: f64,
    pub tec: f64,
    pub msj: f64,
    pub sum_log_v: Option<f64>,
    pub energy_corr: Option<f64>,
}

/// Full model against `no-implicit` (λ_PH = 0) and `no-explicit` (no
/// constraints), each with the same seed. Writes `ablation.csv` under `out`.
pub fn ablate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<Vec<AblationRow>> {
    let mut no_implicit = cfg.clone();
    no_implicit.ph.lambda_max = 0.0;
    let mut no_explicit = cfg.clone();
    no_explicit.constraints.enabled = false;
    let variants = [("full", cfg), ("no-implicit", &no_implicit), ("no-explicit", &no_explicit)];
    let mut rows = Vec::new();
    for (name, c) in variants {
        let dir = out.join(name);
        if name == "no-explicit" {
            // Same stage 1 as the full model.
            let src = run_dir(&out.join("full"), seed).join("stage1.json");
            let dst = run_dir(&dir, seed);
            fs::create_dir_all(&dst).map_err(|e| CliError::io(&dst, e))?;
            fs::copy(&src, dst.join("stage1.json")).map_err(|e| CliError::io(&src, e))?;
            train(c, seed, StageSel::Two, &dir, false, None)?;
        } else {
            train(c, seed, StageSel::All, &dir, false, None)?;
        }
        let ckpt = run_dir(&dir, seed).join("stage2.json");
        let r = eval_checkpoint(c, &ckpt, &run_dir(&dir, seed).join("eval"))?;
        rows.push(AblationRow {
            variant: name.into(),
            return_mean: r.return_mean,
            tec: r.tec,
            msj: r.msj,
            sum_log_v: r.sum_log_v,
            energy_corr: r.energy_corr,
        });
    }
    let mut text = String::from("variant,return_mean,tec,msj,sum_log_v,energy_corr,tec_change_vs_full,msj_change_vs_full\n");
    let full = rows[0].clone();
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let ch = |b: f64, o: f64| relative_change(b, o).map(|x| x.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.return_mean,
            r.tec,
            r.msj,
            opt(r.sum_log_v),
            opt(r.energy_corr),
            ch(full.tec, r.tec),
            ch(full.msj, r.msj)
        ));
    }
    write_text(&out.join("ablation.csv"), &text)?;
    Ok(rows)
}

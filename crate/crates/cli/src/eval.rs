//! Evaluation episodes and the metrics reported for them.

use phwm_core::energy::KinematicHistory;
use phwm_core::envsim::{msj_metric, tec_metric, EnvSpec, Trajectory};
use phwm_core::latentproj::{log_phase_volume, project};
use phwm_core::phcore::PhaseVector;
use phwm_core::stats::{mean, pearson, std_dev};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::pipeline::{run_agent_episode, stream, RunState};

/// Stream id of evaluation episodes; paired runs share initial states.
const EVAL_STREAM: u64 = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: String,
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub tec: f64,
    pub msj: f64,
    /// TEC weights, reported with every TEC value.
    pub alpha: f64,
    pub beta: f64,
    /// Log phase volume of projected `h_phys`; absent without a PH module.
    pub sum_log_v: Option<f64>,
    /// Pearson correlation of the inferred energy with the true one.
    pub energy_corr: Option<f64>,
}

/// Per-step energy alignment rows `(t, Ĥ_t, Ĥ_next, E_true)` in joules.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyTrace {
    pub rows: Vec<[f64; 4]>,
}

impl EnergyTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,h_t,h_next,e_true\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r[0], r[1], r[2], r[3]));
        }
        s
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub trajectories: Vec<Trajectory>,
    pub trace: EnergyTrace,
    pub hs: Vec<Vec<f64>>,
}

/// Energy inferred along a trajectory; windows start once `k + 1` records
/// exist. The action of the following record drives `Ĥ_next` (zero at the
/// end).
pub fn energy_trace(state: &RunState, traj: &Trajectory) -> CliResult<EnergyTrace> {
    let k = state.energy.window();
    let cal = state.energy.calibration;
    let mut rows = Vec::new();
    for t in k..traj.steps.len() {
        let hist = KinematicHistory { q_window: traj.steps[t - k..=t].iter().map(|r| r.q.clone()).collect(), dt: traj.dt };
        let a = traj.steps.get(t + 1).map(|r| r.a.clone()).unwrap_or_else(|| vec![0.0; state.energy.d_a()]);
        let p = state.energy.predict_next_energy(&hist, &a, traj.dt)?;
        rows.push([traj.steps[t].t, cal.to_joules(p.h_t), cal.to_joules(p.h_next), traj.steps[t].e_true]);
    }
    Ok(EnergyTrace { rows })
}

pub fn sum_log_volume(state: &RunState, hs: &[Vec<f64>]) -> CliResult<Option<f64>> {
    let Some(ph) = &state.ph else { return Ok(None) };
    let xs = hs
        .iter()
        .map(|h| project(&ph.projection, ph.partition.phys(h)?))
        .collect::<phwm_core::Result<Vec<PhaseVector>>>()?;
    Ok(Some(log_phase_volume(&xs, ph.projection.phase_dim())?))
}

pub fn evaluate(state: &RunState, cfg: &ExperimentConfig, checkpoint: &str) -> CliResult<Evaluation> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    let e = &cfg.eval;
    let mut rng = stream(state.seed, EVAL_STREAM);
    let mut trajs = Vec::with_capacity(e.episodes);
    let mut hs = Vec::new();
    for _ in 0..e.episodes {
        let (tr, h) = run_agent_episode(&spec, &state.wm, &state.ac, e.steps, &mut rng, false)?;
        trajs.push(tr);
        hs.extend(h);
    }
    let returns: Vec<f64> = trajs.iter().map(Trajectory::total_reward).collect();
    let tec: Vec<f64> = trajs.iter().map(|t| tec_metric(t, e.alpha, e.beta)).collect::<phwm_core::Result<_>>()?;
    let msj: Vec<f64> = trajs.iter().map(msj_metric).collect::<phwm_core::Result<_>>()?;
    let mut trace = EnergyTrace::default();
    let (mut hat, mut truth) = (Vec::new(), Vec::new());
    for (i, tr) in trajs.iter().enumerate() {
        let tt = energy_trace(state, tr)?;
        hat.extend(tt.rows.iter().map(|r| r[1]));
        truth.extend(tt.rows.iter().map(|r| r[3]));
        if i == 0 {
            trace = tt;
        }
    }
    let report = EvalReport {
        env: spec.name().to_string(),
        seed: state.seed,
        config_hash: cfg.hash(),
        checkpoint: checkpoint.to_string(),
        episodes: e.episodes,
        return_mean: mean(&returns),
        return_std: std_dev(&returns),
        tec: mean(&tec),
        msj: mean(&msj),
        alpha: e.alpha,
        beta: e.beta,
        sum_log_v: sum_log_volume(state, &hs)?,
        energy_corr: pearson(&hat, &truth).ok(),
    };
    Ok(Evaluation { report, trajectories: trajs, trace, hs })
}

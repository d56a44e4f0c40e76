//! Two-stage training: world model, PH regularizer and unconstrained
//! actor-critic with online collection, then energy-model fitting, then
//! constrained fine-tuning of the policy on frozen models.

use phwm_core::ac::{ActorCritic, ConstraintInput, DualState};
use phwm_core::diffnet::Tensor;
use phwm_core::energy::{energy_samples, train_energy_model, EnergyModel, KinematicHistory};
use phwm_core::envsim::{env_step, EnvSpec, Trajectory};
use phwm_core::phcore::CurriculumSchedule;
use phwm_core::rssm::{Episode, PhRegularizer, ReplayBuffer, WorldModel};
use phwm_core::stats::quantile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ConstraintSource, ExperimentConfig};
use crate::data::{load_dataset, random_episodes};
use crate::error::{CliError, CliResult};

pub const STATE_VERSION: u32 = 1;

pub const STAGE1_HEADER: &str =
    "step,recon,divergence,reward_pred,ph,lambda_ph,wm_total,return_estimate,actor_loss,critic_loss,entropy";
pub const STAGE2_HEADER: &str = "step,return_estimate,actor_loss,critic_loss,c_energy,c_smooth,lambda_e,lambda_s,total";
pub const ENERGY_HEADER: &str = "epoch,total,energy,next,momentum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Stage1,
    Energy,
    Stage2,
    Done,
}

/// Independent random streams so that optional components never perturb
/// the draws of the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    pub env: ChaCha8Rng,
    pub wm: ChaCha8Rng,
    pub ac: ChaCha8Rng,
    pub constraint: ChaCha8Rng,
    pub energy: ChaCha8Rng,
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub env: String,
    pub seed: u64,
    pub signature: String,
    pub phase: Phase,
    /// Updates completed within the current phase.
    pub step: u64,
    pub wm: WorldModel,
    pub ph: Option<PhRegularizer>,
    pub energy: EnergyModel,
    pub ac: ActorCritic,
    pub dual: Option<DualState>,
    pub replay: ReplayBuffer,
    pub streams: Streams,
    pub stage1_log: Vec<String>,
    pub stage2_log: Vec<String>,
    pub energy_log: Vec<String>,
}

/// Digest of the settings that determine parameter shapes; a checkpoint is
/// only usable under a config with the same signature.
pub fn model_signature(cfg: &ExperimentConfig) -> String {
    let parts = serde_json::json!({
        "env": EnvSpec::by_name(&cfg.env).map(|s| s.name()).unwrap_or("?"),
        "rssm": [cfg.rssm.deter, cfg.rssm.stoch, cfg.rssm.hidden, cfg.rssm.embed],
        "ph": if cfg.ph.enabled { serde_json::to_value(&cfg.ph.structure).unwrap() } else { serde_json::Value::Null },
        "energy": cfg.energy.model,
        "ac": [serde_json::to_value(&cfg.ac.hidden).unwrap(), serde_json::to_value(cfg.ac.min_std).unwrap()],
    });
    hex(&Sha256::digest(parts.to_string().as_bytes()))
}

impl RunState {
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> CliResult<()> {
        if self.version != STATE_VERSION {
            return Err(phwm_core::Error::Version(format!("checkpoint format {} (expected {STATE_VERSION})", self.version)).into());
        }
        if self.signature != model_signature(cfg) {
            return Err(phwm_core::Error::Version(format!(
                "checkpoint for `{}` was trained under different model settings",
                self.env
            ))
            .into());
        }
        Ok(())
    }
}

fn ph_schedule(cfg: &ExperimentConfig) -> CurriculumSchedule {
    let n = cfg.schedule.stage1_steps as f64;
    CurriculumSchedule {
        lambda_max: cfg.ph.lambda_max,
        warmup_steps: (cfg.ph.warmup_frac * n).round() as u64,
        total_steps: (cfg.ph.ramp_end_frac * n).round() as u64,
    }
}

/// Fresh models and seed data for one seed.
pub fn init_state(cfg: &ExperimentConfig, seed: u64) -> CliResult<RunState> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    let (d_a, obs_dim) = (spec.d_a(), spec.obs_dim());
    let mut wm = WorldModel::new(&cfg.rssm, obs_dim, d_a, &mut stream(seed, 1));
    let ph = if cfg.ph.enabled {
        let split = if cfg.ph.split_index == 0 { cfg.rssm.deter.div_ceil(2) } else { cfg.ph.split_index };
        let dt = if cfg.ph.dt > 0.0 { cfg.ph.dt } else { spec.dt };
        let mut reg =
            PhRegularizer::new(cfg.rssm.deter, split, &cfg.ph.structure, d_a, ph_schedule(cfg), dt, cfg.ph.lr, &mut stream(seed, 2))?;
        reg.horizon = cfg.ph.horizon.max(1);
        Some(reg)
    } else {
        None
    };
    let energy = EnergyModel::new(&cfg.energy.model, &spec.angle_mask(), d_a, &mut stream(seed, 3))?;
    let ac = ActorCritic::new(&cfg.ac, wm.feature_dim(), d_a, &mut stream(seed, 4));
    let mut streams = Streams {
        env: stream(seed, 5),
        wm: stream(seed, 6),
        ac: stream(seed, 7),
        constraint: stream(seed, 8),
        energy: stream(seed, 10),
    };
    let seed_trajs = match &cfg.data.dataset {
        Some(dir) => load_dataset(dir, &spec)?,
        None => random_episodes(
            &spec,
            cfg.schedule.seed_episodes,
            cfg.schedule.episode_steps,
            cfg.schedule.random_hold,
            &mut streams.env,
        )?,
    };
    let mut replay = ReplayBuffer::new(cfg.rssm.replay_capacity);
    for tr in seed_trajs {
        replay.push(Episode::from_trajectory(&spec, tr));
    }
    wm.fit_obs_normalization(&replay.all_obs())?;
    Ok(RunState {
        version: STATE_VERSION,
        env: spec.name().to_string(),
        seed,
        signature: model_signature(cfg),
        phase: Phase::Stage1,
        step: 0,
        wm,
        ph,
        energy,
        ac,
        dual: None,
        replay,
        streams,
        stage1_log: Vec::new(),
        stage2_log: Vec::new(),
        energy_log: Vec::new(),
    })
}

pub fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "column counts differ");
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(a.rows() + b.rows(), a.cols(), data)
}

/// One episode of the agent acting in the environment from filtered
/// beliefs. Returns the trajectory and the deterministic state `h` after
/// each recorded step.
pub fn run_agent_episode(
    spec: &EnvSpec,
    wm: &WorldModel,
    ac: &ActorCritic,
    steps: usize,
    rng: &mut ChaCha8Rng,
    stochastic: bool,
) -> CliResult<(Trajectory, Vec<Vec<f64>>)> {
    let zeros = vec![0.0; wm.stoch()];
    let mut state = spec.reset(rng);
    let mut belief = wm.filter_step(&wm.initial_belief(), None, &spec.observe(&state.q, &state.qdot), &zeros)?;
    let mut traj = Trajectory::new(spec);
    let mut hs = Vec::with_capacity(steps);
    for k in 0..steps {
        let feat = belief.features();
        let a = if stochastic {
            ac.policy.sample(&Tensor::col(&feat), rng).1.data().to_vec()
        } else {
            ac.policy.mode(&feat)
        };
        let out = env_step(spec, &state, &a)?;
        traj.record(spec, &out, &a, k + 1 == steps);
        belief = wm.filter_step(&belief, Some(&a), &spec.observe(&out.state.q, &out.state.qdot), &zeros)?;
        hs.push(belief.h.clone());
        state = out.state;
    }
    Ok((traj, hs))
}

/// Imagination start states: posterior means at `n` random positions of a
/// replayed sequence batch.
fn ac_starts(wm: &WorldModel, batch: &phwm_core::rssm::SeqBatch, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let seq = wm.filter_means(batch);
    let (len, cols) = (seq.len(), batch.batch_size());
    let mut h = Tensor::zeros(wm.deter(), n);
    let mut z = Tensor::zeros(wm.stoch(), n);
    for j in 0..n {
        let k = rng.random_range(0..len * cols);
        let (t, c) = (k / cols, k % cols);
        for r in 0..wm.deter() {
            h.set(r, j, seq[t].0.get(r, c));
        }
        for r in 0..wm.stoch() {
            z.set(r, j, seq[t].1.get(r, c));
        }
    }
    (h, z)
}

/// Policy features paired with the kinematic window ending at the same step.
pub fn constraint_batch(
    spec: &EnvSpec,
    state: &mut RunState,
    cfg: &ExperimentConfig,
) -> CliResult<(Tensor, Vec<KinematicHistory>)> {
    let k = state.energy.window();
    let c = &cfg.constraints;
    let rng = &mut state.streams.constraint;
    match c.source {
        ConstraintSource::Replay => {
            let len = (k + 1).max(cfg.schedule.episode_steps.min(16));
            let batch = state.replay.sample(c.batch_size, len, Some(c.recent_episodes), rng)?;
            let seq = state.wm.filter_means(&batch);
            let (h, z) = &seq[len - 1];
            let hists = batch
                .origin
                .iter()
                .map(|&(e, s)| {
                    let steps = &state.replay.episode(e).traj.steps;
                    let end = s + len - 1;
                    KinematicHistory { q_window: steps[end - k..=end].iter().map(|r| r.q.clone()).collect(), dt: spec.dt }
                })
                .collect();
            Ok((concat_rows(h, z), hists))
        }
        ConstraintSource::Imagined => {
            let horizon = cfg.ac.horizon.max(k + 1);
            let starts = c.batch_size.div_ceil(horizon - k);
            let batch = state.replay.sample(starts.min(cfg.rssm.batch_size).max(1), cfg.rssm.seq_len, Some(c.recent_episodes), rng)?;
            let (h0, z0) = ac_starts(&state.wm, &batch, starts, rng);
            let ro = phwm_core::ac::imagine(&state.wm, &state.ac.policy, &state.ac.critic, &h0, &z0, horizon, rng);
            let qs: Vec<Vec<Vec<f64>>> = ro
                .feats
                .iter()
                .map(|f| {
                    let o = state.wm.decode_obs(f);
                    (0..o.cols()).map(|col| spec.coordinates_from_obs(&o.column(col))).collect()
                })
                .collect();
            let feat_dim = state.wm.feature_dim();
            let mut feats = Vec::new();
            let mut hists = Vec::new();
            'outer: for t in k..horizon {
                for col in 0..starts {
                    if hists.len() == c.batch_size {
                        break 'outer;
                    }
                    feats.extend(ro.feats[t].column(col));
                    hists.push(KinematicHistory { q_window: (t - k..=t).map(|i| qs[i][col].clone()).collect(), dt: spec.dt });
                }
            }
            let n = hists.len();
            let cols: Vec<&[f64]> = feats.chunks(feat_dim).collect();
            Ok((Tensor::from_columns(feat_dim, &cols[..n]), hists))
        }
    }
}

fn csv_row(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Runs stage-1 updates until the phase ends or `budget` updates were made
/// in this call. Returns the number of updates made.
pub fn run_stage1(state: &mut RunState, cfg: &ExperimentConfig, budget: Option<u64>) -> CliResult<u64> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    let s = &cfg.schedule;
    let mut done = 0u64;
    while state.phase == Phase::Stage1 && state.step < s.stage1_steps {
        if budget.is_some_and(|b| done >= b) {
            return Ok(done);
        }
        let i = state.step;
        if s.collect_every > 0 && i > 0 && i.is_multiple_of(s.collect_every) {
            let (traj, _) = run_agent_episode(&spec, &state.wm, &state.ac, s.episode_steps, &mut state.streams.env, true)?;
            state.replay.push(Episode::from_trajectory(&spec, traj));
        }
        let batch = state.replay.sample(cfg.rssm.batch_size, cfg.rssm.seq_len, None, &mut state.streams.wm)?;
        let wl = state.wm.update(state.ph.as_mut(), &batch, i, &mut state.streams.wm)?;
        let mut ar = None;
        if s.ac_every > 0 && i.is_multiple_of(s.ac_every) {
            let (h, z) = ac_starts(&state.wm, &batch, s.ac_starts, &mut state.streams.ac);
            ar = Some(state.ac.update::<ChaCha8Rng>(&state.wm, &h, &z, &mut state.streams.ac, None)?);
        }
        if i.is_multiple_of(s.log_every.max(1)) || i + 1 == s.stage1_steps {
            let a = ar.unwrap_or_default();
            state.stage1_log.push(format!(
                "{i},{}",
                csv_row(&[
                    wl.recon,
                    wl.divergence,
                    wl.reward_pred,
                    wl.ph,
                    wl.lambda_ph,
                    wl.total,
                    a.return_estimate,
                    a.actor_loss,
                    a.critic_loss,
                    a.entropy
                ])
            ));
        }
        state.step += 1;
        done += 1;
    }
    if state.phase == Phase::Stage1 {
        state.phase = Phase::Energy;
        state.step = 0;
    }
    Ok(done)
}

/// Fits the energy model on every trajectory in the replay buffer.
pub fn run_energy_phase(state: &mut RunState, cfg: &ExperimentConfig) -> CliResult<()> {
    if state.phase != Phase::Energy {
        return Ok(());
    }
    let spec = EnvSpec::by_name(&cfg.env)?;
    let trajs: Vec<Trajectory> = state.replay.episodes().map(|e| e.traj.clone()).collect();
    let samples = energy_samples(&spec, &trajs, state.energy.window());
    let epochs = train_energy_model(&mut state.energy, &samples, &cfg.energy.train, &mut state.streams.energy)?;
    state.energy_log =
        epochs.iter().enumerate().map(|(i, e)| format!("{i},{}", csv_row(&[e.total, e.energy, e.next, e.momentum]))).collect();
    state.phase = Phase::Stage2;
    state.step = 0;
    Ok(())
}

/// Sets `ε` to the configured quantile of the current policy's batch
/// constraint values over a calibration run, and the scales to their mean
/// magnitude.
pub fn calibrate_dual(state: &mut RunState, cfg: &ExperimentConfig) -> CliResult<DualState> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    let c = &cfg.constraints;
    let (mut es, mut ss) = (Vec::new(), Vec::new());
    for _ in 0..c.calibration_batches {
        let (feats, hists) = constraint_batch(&spec, state, cfg)?;
        let (_, eval) = state.ac.evaluate_constraints(&state.energy, &feats, &hists, spec.dt, &mut state.streams.constraint)?;
        es.push(eval.c_energy);
        ss.push(eval.c_smooth);
    }
    let dual = DualState::new(quantile(&es, c.percentile)?, quantile(&ss, c.percentile)?, c.eta_lambda);
    if !c.normalize {
        return Ok(dual);
    }
    let mag = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    Ok(dual.with_scales(mag(&es), mag(&ss)))
}

/// Stage-2 updates on frozen world and energy models. Returns the number of
/// updates made.
pub fn run_stage2(state: &mut RunState, cfg: &ExperimentConfig, budget: Option<u64>) -> CliResult<u64> {
    let spec = EnvSpec::by_name(&cfg.env)?;
    let c = &cfg.constraints;
    let s = &cfg.schedule;
    let mut done = 0u64;
    if state.phase == Phase::Stage2 && c.enabled && state.dual.is_none() {
        state.dual = Some(calibrate_dual(state, cfg)?);
    }
    while state.phase == Phase::Stage2 && state.step < s.stage2_steps {
        if budget.is_some_and(|b| done >= b) {
            return Ok(done);
        }
        let i = state.step;
        if c.collect_every > 0 && i > 0 && i.is_multiple_of(c.collect_every) {
            let (traj, _) = run_agent_episode(&spec, &state.wm, &state.ac, s.episode_steps, &mut state.streams.env, true)?;
            state.replay.push(Episode::from_trajectory(&spec, traj));
        }
        let batch = state.replay.sample(cfg.rssm.batch_size, cfg.rssm.seq_len, None, &mut state.streams.ac)?;
        let (h, z) = ac_starts(&state.wm, &batch, s.ac_starts, &mut state.streams.ac);
        let report = if c.enabled {
            let (feats, hists) = constraint_batch(&spec, state, cfg)?;
            let RunState { wm, ac, energy, dual, streams, .. } = state;
            let dual = dual.as_mut().expect("calibrated");
            let r = ac.update(
                wm,
                &h,
                &z,
                &mut streams.ac,
                Some(ConstraintInput { energy, feats: &feats, hists: &hists, dt: spec.dt, dual, rng: &mut streams.constraint }),
            )?;
            if !c.energy {
                dual.lambda_e = 0.0;
            }
            if !c.smooth {
                dual.lambda_s = 0.0;
            }
            r
        } else {
            state.ac.update::<ChaCha8Rng>(&state.wm, &h, &z, &mut state.streams.ac, None)?
        };
        if i.is_multiple_of(s.log_every.max(1)) || i + 1 == s.stage2_steps {
            state.stage2_log.push(format!(
                "{i},{}",
                csv_row(&[
                    report.return_estimate,
                    report.actor_loss,
                    report.critic_loss,
                    report.c_energy,
                    report.c_smooth,
                    report.lambda_e,
                    report.lambda_s,
                    report.total
                ])
            ));
        }
        state.step += 1;
        done += 1;
    }
    if state.phase == Phase::Stage2 {
        state.phase = Phase::Done;
        state.step = 0;
    }
    Ok(done)
}

/// Rejects a state that cannot run `phase` under `cfg`.
pub fn expect_phase(state: &RunState, phase: Phase) -> CliResult<()> {
    if state.phase != phase {
        return Err(CliError::Config(format!("checkpoint is in phase {:?}, expected {phase:?}", state.phase)));
    }
    Ok(())
}

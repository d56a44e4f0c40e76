#![allow(dead_code)]

use phwm_cli::ExperimentConfig;

/// Small networks and short schedules that run in seconds on one core.
pub fn tiny(env: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig { env: env.into(), ..ExperimentConfig::default() };
    c.rssm.deter = 16;
    c.rssm.stoch = 4;
    c.rssm.hidden = 16;
    c.rssm.embed = 16;
    c.rssm.batch_size = 4;
    c.rssm.seq_len = 8;
    c.ph.structure.dim = 4;
    c.ph.structure.hamiltonian_hidden = vec![8];
    c.energy.model.hidden = vec![8];
    c.energy.model.tcn_hidden = 4;
    c.energy.model.action_hidden = 4;
    c.energy.train.epochs = 1;
    c.ac.hidden = vec![16];
    c.ac.horizon = 5;
    c.schedule.stage1_steps = 12;
    c.schedule.stage2_steps = 6;
    c.schedule.seed_episodes = 3;
    c.schedule.episode_steps = 30;
    c.schedule.collect_every = 5;
    c.schedule.ac_starts = 8;
    c.schedule.checkpoint_every = 4;
    c.schedule.log_every = 1;
    c.constraints.batch_size = 8;
    c.constraints.collect_every = 3;
    c.eval.episodes = 2;
    c.eval.steps = 20;
    c.data.episodes = 3;
    c.data.steps = 20;
    c
}

/// Desk-scale settings used by the direction-matched acceptance runs.
pub fn desk(env: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig { env: env.into(), ..ExperimentConfig::default() };
    c.rssm.deter = 32;
    c.rssm.stoch = 8;
    c.rssm.hidden = 32;
    c.rssm.embed = 32;
    c.rssm.batch_size = 8;
    c.rssm.seq_len = 16;
    c.energy.model.hidden = vec![32, 32];
    c.energy.model.tcn_hidden = 16;
    c.energy.model.action_hidden = 16;
    c.energy.train.epochs = 5;
    c.ac.hidden = vec![32, 32];
    c.ac.horizon = 10;
    c.schedule.seed_episodes = 5;
    c.schedule.episode_steps = 100;
    c.schedule.collect_every = 50;
    c.schedule.ac_starts = 32;
    c.schedule.checkpoint_every = 100_000;
    c.constraints.batch_size = 32;
    c.constraints.collect_every = 50;
    c.eval.episodes = 5;
    c.eval.steps = 100;
    c
}

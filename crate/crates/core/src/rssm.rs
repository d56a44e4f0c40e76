//! Recurrent state-space world model on proprioceptive observations.
//!
//! The latent is `s_t = (h_t, z_t)`: `h_t` from a gated recurrent cell over
//! `(h_{t−1}, z_{t−1}, a_{t−1})` and `z_t` Gaussian, drawn from the posterior
//! `q(z | h, o)` during training and from the prior `p(z | h)` in
//! imagination. The optional PH regularizer reads the physical half of `h`
//! under stop-gradient, so it can only move its own parameters.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{apply_dense, dense_layer, param_grads, Activation, Adam, Bound, Graph, Mlp, ParamVector, SlotId, Tensor, Var};
use crate::envsim::{EnvSpec, Trajectory};
use crate::error::{dim_check, Error, Result};
use crate::latentproj::{LatentPartition, Projection};
use crate::phcore::{curriculum_weight, shadow_loss, CurriculumSchedule, PhConfig, PhStructure};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RssmConfig {
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub embed: usize,
    pub kl_scale: f64,
    /// Weight of the prior-training side of the balanced divergence.
    pub kl_balance: f64,
    pub free_bits: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub replay_capacity: usize,
}

impl Default for RssmConfig {
    fn default() -> Self {
        RssmConfig {
            deter: 64,
            stoch: 16,
            hidden: 64,
            embed: 64,
            kl_scale: 1.0,
            kl_balance: 0.8,
            free_bits: 1.0,
            seq_len: 32,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: 100.0,
            replay_capacity: 100_000,
        }
    }
}

/// Diagonal Gaussian with clamped log standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianParams {
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.log_std).zip(noise).map(|((m, s), e)| m + s.exp() * e).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub z_dist: GaussianParams,
}

impl BeliefState {
    pub fn features(&self) -> Vec<f64> {
        self.h.iter().chain(&self.z).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldModelLoss {
    pub recon: f64,
    pub divergence: f64,
    pub reward_pred: f64,
    pub ph: f64,
    pub lambda_ph: f64,
    pub total: f64,
}

/// Per-sample KL(q ‖ p) of diagonal Gaussians, summed over dimensions.
pub fn kl_gaussian<'g>(qm: Var<'g>, qs: Var<'g>, pm: Var<'g>, ps: Var<'g>) -> Var<'g> {
    let var_ratio = (qs - ps).scale(2.0).exp();
    let mean_term = (qm - pm).square() / ps.scale(2.0).exp();
    (ps - qs + (var_ratio + mean_term).scale(0.5)).add_scalar(-0.5).sum_rows()
}

pub fn kl_gaussian_values(q: &GaussianParams, p: &GaussianParams) -> f64 {
    let mut kl = 0.0;
    for i in 0..q.mean.len() {
        let (qs, ps) = (q.log_std[i], p.log_std[i]);
        let d = q.mean[i] - p.mean[i];
        kl += ps - qs + 0.5 * ((2.0 * (qs - ps)).exp() + d * d / (2.0 * ps).exp()) - 0.5;
    }
    kl
}

fn accumulate<'g>(acc: &mut Option<Var<'g>>, v: Var<'g>) {
    *acc = Some(match acc.take() {
        Some(a) => a + v,
        None => v,
    });
}

/// Standard-normal noise as a `(rows x cols)` tensor.
pub fn normal_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Gru {
    input: (SlotId, SlotId),
    reset: (SlotId, SlotId),
    update: (SlotId, SlotId),
    candidate: (SlotId, SlotId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub params: ParamVector,
    pub adam: Adam,
    pub cfg: RssmConfig,
    obs_dim: usize,
    act_dim: usize,
    gru: Gru,
    prior: Mlp,
    posterior: Mlp,
    encoder: Mlp,
    decoder: Mlp,
    reward: Mlp,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

/// Graph nodes of one latent step.
#[derive(Clone, Copy)]
pub struct LatentNodes<'g> {
    pub h: Var<'g>,
    pub z: Var<'g>,
    pub post_mean: Var<'g>,
    pub post_std: Var<'g>,
    pub prior_mean: Var<'g>,
    pub prior_std: Var<'g>,
}

impl WorldModel {
    pub fn new(cfg: &RssmConfig, obs_dim: usize, act_dim: usize, rng: &mut impl Rng) -> Self {
        let (d, s, hd) = (cfg.deter, cfg.stoch, cfg.hidden);
        let mut params = ParamVector::new();
        let gru = Gru {
            input: dense_layer(&mut params, "rssm.gru.in", s + act_dim, hd, rng),
            reset: dense_layer(&mut params, "rssm.gru.reset", hd + d, d, rng),
            update: dense_layer(&mut params, "rssm.gru.update", hd + d, d, rng),
            candidate: dense_layer(&mut params, "rssm.gru.cand", hd + d, d, rng),
        };
        let act = Activation::Tanh;
        let prior = Mlp::new(&mut params, "rssm.prior", &[d, hd, 2 * s], act, rng);
        let encoder = Mlp::new(&mut params, "rssm.encoder", &[obs_dim, hd, cfg.embed], act, rng);
        let posterior = Mlp::new(&mut params, "rssm.posterior", &[d + cfg.embed, hd, 2 * s], act, rng);
        let decoder = Mlp::new(&mut params, "rssm.decoder", &[d + s, hd, hd, obs_dim], act, rng);
        let reward = Mlp::new(&mut params, "rssm.reward", &[d + s, hd, 1], act, rng);
        let adam = Adam::new(params.len(), cfg.lr).with_clip(cfg.clip_norm);
        WorldModel {
            params,
            adam,
            cfg: cfg.clone(),
            obs_dim,
            act_dim,
            gru,
            prior,
            posterior,
            encoder,
            decoder,
            reward,
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn deter(&self) -> usize {
        self.cfg.deter
    }

    pub fn stoch(&self) -> usize {
        self.cfg.stoch
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.deter + self.cfg.stoch
    }

    pub fn gru_layers(&self) -> [(SlotId, SlotId); 4] {
        [self.gru.input, self.gru.reset, self.gru.update, self.gru.candidate]
    }

    pub fn prior_net(&self) -> &Mlp {
        &self.prior
    }

    pub fn posterior_net(&self) -> &Mlp {
        &self.posterior
    }

    /// Sets per-dimension observation normalization from data.
    pub fn fit_obs_normalization(&mut self, obs: &[Vec<f64>]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::InsufficientData("no observations to normalize".into()));
        }
        for i in 0..self.obs_dim {
            let col: Vec<f64> = obs.iter().map(|o| o[i]).collect();
            self.obs_mean[i] = crate::stats::mean(&col);
            self.obs_std[i] = crate::stats::std_dev(&col).max(1e-3);
        }
        Ok(())
    }

    pub fn normalize_obs(&self, o: &Tensor) -> Tensor {
        let mut out = o.clone();
        for r in 0..o.rows() {
            for c in 0..o.cols() {
                out.set(r, c, (o.get(r, c) - self.obs_mean[r]) / self.obs_std[r]);
            }
        }
        out
    }

    pub fn recurrent_graph<'g>(&self, b: &Bound<'g>, h: Var<'g>, z: Var<'g>, a: Var<'g>) -> Var<'g> {
        let g = h.graph();
        let inp = apply_dense(b, self.gru.input, g.concat_rows(&[z, a])).tanh();
        let ih = g.concat_rows(&[inp, h]);
        let r = apply_dense(b, self.gru.reset, ih).sigmoid();
        let u = apply_dense(b, self.gru.update, ih).sigmoid();
        let c = apply_dense(b, self.gru.candidate, g.concat_rows(&[inp, r * h])).tanh();
        (-u).add_scalar(1.0) * h + u * c
    }

    fn split_gaussian<'g>(&self, out: Var<'g>) -> (Var<'g>, Var<'g>) {
        let s = self.cfg.stoch;
        (out.slice_rows(0, s), out.slice_rows(s, s).clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    pub fn prior_graph<'g>(&self, b: &Bound<'g>, h: Var<'g>) -> (Var<'g>, Var<'g>) {
        self.split_gaussian(self.prior.forward(b, h))
    }

    /// `o_norm` is an already normalized observation batch.
    pub fn posterior_graph<'g>(&self, b: &Bound<'g>, h: Var<'g>, o_norm: Var<'g>) -> (Var<'g>, Var<'g>) {
        let embed = self.encoder.forward(b, o_norm).tanh();
        self.split_gaussian(self.posterior.forward(b, h.graph().concat_rows(&[h, embed])))
    }

    pub fn decode_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>) -> Var<'g> {
        self.decoder.forward(b, feat)
    }

    pub fn reward_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>) -> Var<'g> {
        self.reward.forward(b, feat)
    }

    /// Posterior filtering over a sequence batch; returns one node set per
    /// step. `noise[t]` is the reparameterization noise of step `t`.
    pub fn observe_graph<'g>(
        &self,
        g: &'g Graph,
        b: &Bound<'g>,
        batch: &SeqBatch,
        noise: &[Tensor],
    ) -> Vec<LatentNodes<'g>> {
        let n = batch.batch_size();
        let mut h = g.constant(Tensor::zeros(self.cfg.deter, n));
        let mut z = g.constant(Tensor::zeros(self.cfg.stoch, n));
        let mut out = Vec::with_capacity(batch.len());
        for t in 0..batch.len() {
            if t > 0 {
                h = self.recurrent_graph(b, h, z, g.constant(batch.actions[t].clone()));
            }
            let (pm, ps) = self.prior_graph(b, h);
            let o = g.constant(self.normalize_obs(&batch.obs[t]));
            let (qm, qs) = self.posterior_graph(b, h, o);
            z = qm + qs.exp() * g.constant(noise[t].clone());
            out.push(LatentNodes { h, z, post_mean: qm, post_std: qs, prior_mean: pm, prior_std: ps });
        }
        out
    }

    // ---- point evaluations ----

    pub fn recurrent_step(&self, h: &[f64], z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        dim_check(h.len() == self.cfg.deter && z.len() == self.cfg.stoch && a.len() == self.act_dim, || {
            format!("recurrent step dims h {} z {} a {}", h.len(), z.len(), a.len())
        })?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let c = |v: &[f64]| g.constant(Tensor::col(v));
        Ok(self.recurrent_graph(&b, c(h), c(z), c(a)).value().data().to_vec())
    }

    pub fn prior(&self, h: &[f64]) -> Result<GaussianParams> {
        dim_check(h.len() == self.cfg.deter, || "prior input dimension".into())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let (m, s) = self.prior_graph(&b, g.constant(Tensor::col(h)));
        Ok(GaussianParams { mean: m.value().data().to_vec(), log_std: s.value().data().to_vec() })
    }

    /// `o` is a raw observation; it is normalized internally.
    pub fn posterior(&self, h: &[f64], o: &[f64]) -> Result<GaussianParams> {
        dim_check(h.len() == self.cfg.deter && o.len() == self.obs_dim, || "posterior input dimension".into())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let o = g.constant(self.normalize_obs(&Tensor::col(o)));
        let (m, s) = self.posterior_graph(&b, g.constant(Tensor::col(h)), o);
        Ok(GaussianParams { mean: m.value().data().to_vec(), log_std: s.value().data().to_vec() })
    }

    pub fn initial_belief(&self) -> BeliefState {
        let s = self.cfg.stoch;
        BeliefState {
            h: vec![0.0; self.cfg.deter],
            z: vec![0.0; s],
            z_dist: GaussianParams { mean: vec![0.0; s], log_std: vec![0.0; s] },
        }
    }

    /// One filtering step: advance `h` with the previous action (if any) and
    /// sample `z` from the posterior given `o`.
    pub fn filter_step(
        &self,
        prev: &BeliefState,
        a_prev: Option<&[f64]>,
        o: &[f64],
        noise: &[f64],
    ) -> Result<BeliefState> {
        let h = match a_prev {
            Some(a) => self.recurrent_step(&prev.h, &prev.z, a)?,
            None => prev.h.clone(),
        };
        let dist = self.posterior(&h, o)?;
        let z = dist.sample(noise);
        Ok(BeliefState { h, z, z_dist: dist })
    }

    /// Decoder mean in raw observation units for a `(deter + stoch) x B`
    /// feature batch.
    pub fn decode_obs(&self, feat: &Tensor) -> Tensor {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let mut o = (*self.decode_graph(&b, g.constant(feat.clone())).value()).clone();
        for r in 0..o.rows() {
            for c in 0..o.cols() {
                o.set(r, c, o.get(r, c) * self.obs_std[r] + self.obs_mean[r]);
            }
        }
        o
    }

    /// Batched posterior means along a sequence batch (no sampling noise).
    pub fn filter_means(&self, batch: &SeqBatch) -> Vec<(Tensor, Tensor)> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let zeros: Vec<Tensor> = (0..batch.len()).map(|_| Tensor::zeros(self.cfg.stoch, batch.batch_size())).collect();
        self.observe_graph(&g, &b, batch, &zeros).iter().map(|n| ((*n.h.value()).clone(), (*n.z.value()).clone())).collect()
    }
}

/// Sequence minibatch. `actions[t]` is the action that led into step `t`
/// (zero for `t = 0`); `rewards[t]` is the reward received on arriving at
/// step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub obs: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    /// Episode index and start offset of each column.
    pub origin: Vec<(usize, usize)>,
}

impl SeqBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.obs.first().map(|t| t.cols()).unwrap_or(0)
    }
}

/// PH shadow-dynamics regularizer with its own optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhRegularizer {
    pub partition: LatentPartition,
    pub projection: Projection,
    pub structure: PhStructure,
    pub schedule: CurriculumSchedule,
    pub dt: f64,
    /// Rollout length of the shadow prediction (1 = adjacent pairs).
    pub horizon: usize,
    pub adam_projection: Adam,
    pub adam_structure: Adam,
}

impl PhRegularizer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        deter: usize,
        split_index: usize,
        cfg: &PhConfig,
        act_dim: usize,
        schedule: CurriculumSchedule,
        dt: f64,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let partition = LatentPartition::new(deter, split_index)?;
        let projection = Projection::new(cfg.dim, partition.phys_dim(), rng)?;
        let structure = PhStructure::new(cfg, act_dim, rng);
        Ok(PhRegularizer {
            partition,
            adam_projection: Adam::new(projection.params.len(), lr),
            adam_structure: Adam::new(structure.params.len(), lr),
            projection,
            structure,
            schedule,
            dt,
            horizon: 1,
        })
    }

    /// Mean shadow loss over all valid `(t, t + k)` pairs, `k ≤ horizon`.
    pub fn loss_graph<'g>(
        &self,
        pb: &Bound<'g>,
        sb: &Bound<'g>,
        latents: &[LatentNodes<'g>],
        actions: &[Tensor],
    ) -> Result<Var<'g>> {
        let g = pb.vars()[0].graph();
        let xs: Vec<Var<'g>> = latents
            .iter()
            .map(|n| self.projection.apply(pb, self.partition.phys_var(n.h.detach())))
            .collect();
        let mut total: Option<Var<'g>> = None;
        let mut count = 0usize;
        for t in 0..xs.len().saturating_sub(1) {
            let mut x = xs[t];
            for k in 1..=self.horizon.max(1) {
                if t + k >= xs.len() {
                    break;
                }
                x = self.structure.predict_next(sb, x, g.constant(actions[t + k].clone()), self.dt)?;
                let l = shadow_loss(xs[t + k], x)?;
                accumulate(&mut total, l);
                count += 1;
            }
        }
        let total = total.ok_or_else(|| Error::InsufficientData("PH loss needs sequences of length ≥ 2".into()))?;
        Ok(total.scale(1.0 / count as f64))
    }
}

impl WorldModel {
    /// One optimizer step on the composite loss. `ph` is updated through its
    /// own optimizers; the curriculum weight is taken at `step`.
    pub fn update(
        &mut self,
        ph: Option<&mut PhRegularizer>,
        batch: &SeqBatch,
        step: u64,
        rng: &mut impl Rng,
    ) -> Result<WorldModelLoss> {
        let n = batch.batch_size();
        let noise: Vec<Tensor> = (0..batch.len()).map(|_| normal_noise(self.cfg.stoch, n, rng)).collect();
        let g = Graph::new();
        let b = self.params.bind(&g);
        let latents = self.observe_graph(&g, &b, batch, &noise);
        let steps = (batch.len() * n) as f64;
        let mut recon = None::<Var<'_>>;
        let mut reward = None::<Var<'_>>;
        let mut div = None::<Var<'_>>;
        let (fb, bal) = (self.cfg.free_bits, self.cfg.kl_balance);
        let half_log_2pi = g.constant(Tensor::scalar(HALF_LOG_2PI));
        for (t, node) in latents.iter().enumerate() {
            let feat = g.concat_rows(&[node.h, node.z]);
            let o = g.constant(self.normalize_obs(&batch.obs[t]));
            let nll = (self.decode_graph(&b, feat) - o).square().sum().scale(0.5)
                + half_log_2pi.scale((self.obs_dim * n) as f64);
            accumulate(&mut recon, nll);
            if t > 0 {
                let r = g.constant(batch.rewards[t].clone());
                let rn = (self.reward_graph(&b, feat) - r).square().sum().scale(0.5) + half_log_2pi.scale(n as f64);
                accumulate(&mut reward, rn);
            }
            let kl_prior = kl_gaussian(node.post_mean.detach(), node.post_std.detach(), node.prior_mean, node.prior_std);
            let kl_post = kl_gaussian(node.post_mean, node.post_std, node.prior_mean.detach(), node.prior_std.detach());
            let kl = kl_prior.clamp(fb, f64::INFINITY).scale(bal) + kl_post.clamp(fb, f64::INFINITY).scale(1.0 - bal);
            accumulate(&mut div, kl.sum());
        }
        let recon = recon.expect("non-empty batch").scale(1.0 / steps);
        let div = div.expect("non-empty batch").scale(1.0 / steps);
        let reward_steps = ((batch.len() - 1).max(1) * n) as f64;
        let reward = reward.map(|r| r.scale(1.0 / reward_steps)).unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
        let rssm = recon + div.scale(self.cfg.kl_scale) + reward;

        let mut report = WorldModelLoss {
            recon: recon.item(),
            divergence: div.item(),
            reward_pred: reward.item(),
            ..WorldModelLoss::default()
        };
        let total;
        let mut ph_bounds = None;
        if let Some(reg) = ph.as_deref() {
            let pb = reg.projection.params.bind(&g);
            let sb = reg.structure.params.bind(&g);
            let lph = reg.loss_graph(&pb, &sb, &latents, &batch.actions)?;
            let lambda = curriculum_weight(step, &reg.schedule);
            report.ph = lph.item();
            report.lambda_ph = lambda;
            total = rssm + lph.scale(lambda);
            ph_bounds = Some((pb, sb));
        } else {
            total = rssm;
        }
        report.total = total.item();
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!("world-model loss is not finite at step {step}: {report:?}")));
        }
        match (ph, ph_bounds) {
            (Some(reg), Some((pb, sb))) => {
                let mut grads = param_grads(&g, total, &[&b, &pb, &sb]).into_iter();
                self.adam.step(&mut self.params, &grads.next().unwrap());
                reg.adam_projection.step(&mut reg.projection.params, &grads.next().unwrap());
                reg.adam_structure.step(&mut reg.structure.params, &grads.next().unwrap());
            }
            _ => {
                let grads = param_grads(&g, total, &[&b]).remove(0);
                self.adam.step(&mut self.params, &grads);
            }
        }
        Ok(report)
    }
}

/// Episode stored in the replay buffer: the recorded trajectory and its
/// observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub traj: Trajectory,
}

impl Episode {
    pub fn from_trajectory(spec: &EnvSpec, traj: Trajectory) -> Self {
        Episode { obs: traj.steps.iter().map(|s| spec.observe(&s.q, &s.qdot)).collect(), traj }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// FIFO of whole episodes bounded by total step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    episodes: VecDeque<Episode>,
    steps: usize,
    /// Count of episodes ever inserted; used to address recent data.
    inserted: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, episodes: VecDeque::new(), steps: 0, inserted: 0 }
    }

    pub fn push(&mut self, ep: Episode) {
        self.steps += ep.len();
        self.episodes.push_back(ep);
        self.inserted += 1;
        while self.steps > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().unwrap();
            self.steps -= old.len();
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn all_obs(&self) -> Vec<Vec<f64>> {
        self.episodes.iter().flat_map(|e| e.obs.iter().cloned()).collect()
    }

    /// Samples `batch` windows of `len` steps, restricted to the `recent`
    /// newest episodes when given.
    pub fn sample(&self, batch: usize, len: usize, recent: Option<usize>, rng: &mut impl Rng) -> Result<SeqBatch> {
        let skip = recent.map(|r| self.episodes.len().saturating_sub(r)).unwrap_or(0);
        let pool: Vec<(usize, usize)> = self
            .episodes
            .iter()
            .enumerate()
            .skip(skip)
            .filter(|(_, e)| e.len() >= len)
            .map(|(i, e)| (i, e.len() - len + 1))
            .collect();
        let total: usize = pool.iter().map(|p| p.1).sum();
        if total == 0 || len == 0 {
            return Err(Error::InsufficientData(format!("no episode holds a window of {len} steps")));
        }
        let mut origin = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.random_range(0..total);
            for &(i, n) in &pool {
                if k < n {
                    origin.push((i, k));
                    break;
                }
                k -= n;
            }
        }
        let first = &self.episodes[origin[0].0];
        let (od, ad) = (first.obs[0].len(), first.traj.steps[0].a.len());
        let mut obs = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len);
        let mut rewards = Vec::with_capacity(len);
        for t in 0..len {
            let mut o = Tensor::zeros(od, batch);
            let mut a = Tensor::zeros(ad, batch);
            let mut r = Tensor::zeros(1, batch);
            for (c, &(i, s)) in origin.iter().enumerate() {
                let ep = &self.episodes[i];
                for (k, v) in ep.obs[s + t].iter().enumerate() {
                    o.set(k, c, *v);
                }
                if t > 0 {
                    let rec = &ep.traj.steps[s + t];
                    for (k, v) in rec.a.iter().enumerate() {
                        a.set(k, c, *v);
                    }
                    r.set(0, c, rec.r);
                }
            }
            obs.push(o);
            actions.push(a);
            rewards.push(r);
        }
        Ok(SeqBatch { obs, actions, rewards, origin })
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> RssmConfig {
        RssmConfig { deter: 8, stoch: 3, hidden: 8, embed: 6, seq_len: 6, batch_size: 4, ..RssmConfig::default() }
    }

    #[test]
    fn zero_weight_cell_is_bias_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wm = WorldModel::new(&small(), 2, 1, &mut rng);
        let layers = wm.gru_layers();
        for (w, b) in layers {
            wm.params.fill(w, 0.0);
            wm.params.fill(b, 0.0);
        }
        wm.params.fill(layers[2].1, 0.4);
        wm.params.fill(layers[3].1, -0.7);
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let out = wm.recurrent_step(&h, &[0.5, 0.1, -0.2], &[0.9]).unwrap();
        let u = 1.0 / (1.0 + (-0.4f64).exp());
        let c = (-0.7f64).tanh();
        for i in 0..8 {
            assert!((out[i] - ((1.0 - u) * h[i] + u * c)).abs() < 1e-15);
        }
        assert_eq!(out, wm.recurrent_step(&h, &[0.5, 0.1, -0.2], &[0.9]).unwrap());
        assert!(wm.recurrent_step(&h[..3], &[0.5, 0.1, -0.2], &[0.9]).is_err());
    }

    #[test]
    fn zero_weight_heads_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut wm = WorldModel::new(&small(), 2, 1, &mut rng);
        let post = wm.posterior_net().clone();
        post.zero(&mut wm.params);
        let (_, bias) = post.output_layer();
        wm.params.slice_mut(bias).copy_from_slice(&[0.0, 0.0, 0.0, 0.3, -9.0, 4.0]);
        let d = wm.posterior(&[0.2; 8], &[1.0, -1.0]).unwrap();
        assert_eq!(d.mean, vec![0.0; 3]);
        assert_eq!(d.log_std, vec![0.3, LOG_STD_MIN, LOG_STD_MAX]);
        assert_eq!(d.sample(&[0.0; 3]), d.mean);
    }

    #[test]
    fn reparameterized_samples_match_moments() {
        let d = GaussianParams { mean: vec![1.5], log_std: vec![0.4f64.ln()] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&[rng.sample(StandardNormal)])[0]).collect();
        let m = crate::stats::mean(&xs);
        let s = crate::stats::std_dev(&xs);
        assert!((m - 1.5).abs() < 0.015 && (s - 0.4).abs() < 0.004, "{m} {s}");
    }

    #[test]
    fn kl_cases() {
        let n01 = GaussianParams { mean: vec![0.0, 0.0], log_std: vec![0.0, 0.0] };
        let n11 = GaussianParams { mean: vec![1.0, 1.0], log_std: vec![0.0, 0.0] };
        assert_eq!(kl_gaussian_values(&n01, &n01), 0.0);
        assert!((kl_gaussian_values(&n01, &n11) - 1.0).abs() < 1e-15);
        let g = Graph::new();
        let c = |v: &[f64]| g.constant(Tensor::col(v));
        let kl = kl_gaussian(c(&[0.0]), c(&[0.0]), c(&[1.0]), c(&[0.0])).item();
        assert!((kl - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut r = || rng.random_range(-2.0..2.0);
            let q = GaussianParams { mean: vec![r(), r()], log_std: vec![r(), r()] };
            let p = GaussianParams { mean: vec![r(), r()], log_std: vec![r(), r()] };
            assert!(kl_gaussian_values(&q, &p) >= 0.0);
            let gk = kl_gaussian(c(&q.mean), c(&q.log_std), c(&p.mean), c(&p.log_std)).item();
            assert!((gk - kl_gaussian_values(&q, &p)).abs() < 1e-12);
        }
    }

    fn toy_buffer(rng: &mut ChaCha8Rng) -> ReplayBuffer {
        let spec = EnvSpec::pendulum();
        let mut buf = ReplayBuffer::new(10_000);
        for _ in 0..3 {
            let mut pol = crate::envsim::HeldRandomActions::new(1, 5);
            let tr = crate::envsim::rollout_episode(&spec, 30, rng, |_, r| pol.next(r)).unwrap();
            buf.push(Episode::from_trajectory(&spec, tr));
        }
        buf
    }

    #[test]
    fn replay_fifo_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = toy_buffer(&mut rng);
        assert_eq!(buf.steps(), 90);
        buf.capacity = 70;
        let extra = buf.episode(0).clone();
        buf.push(extra);
        assert_eq!(buf.num_episodes(), 2);
        let b = buf.sample(5, 6, None, &mut rng).unwrap();
        assert_eq!((b.len(), b.batch_size()), (6, 5));
        assert_eq!(b.actions[0].data(), &[0.0; 5]);
        let (e, s) = b.origin[2];
        assert_eq!(b.obs[3].get(1, 2), buf.episode(e).obs[s + 3][1]);
        assert!(buf.sample(2, 31, None, &mut rng).is_err());
    }

    #[test]
    fn ph_loss_leaves_backbone_gradient_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let buf = toy_buffer(&mut rng);
        let batch = buf.sample(4, 6, None, &mut rng).unwrap();
        let wm = WorldModel::new(&small(), 3, 1, &mut rng);
        let ph_cfg = PhConfig { dim: 2, hamiltonian_hidden: vec![8], ..PhConfig::default() };
        let sched = CurriculumSchedule { lambda_max: 1.0, warmup_steps: 0, total_steps: 0 };
        let reg = PhRegularizer::new(8, 4, &ph_cfg, 1, sched, 0.05, 1e-3, &mut rng).unwrap();
        let noise: Vec<Tensor> = (0..6).map(|_| normal_noise(3, 4, &mut rng)).collect();
        let g = Graph::new();
        let b = wm.params.bind(&g);
        let pb = reg.projection.params.bind(&g);
        let sb = reg.structure.params.bind(&g);
        let lat = wm.observe_graph(&g, &b, &batch, &noise);
        let l = reg.loss_graph(&pb, &sb, &lat, &batch.actions).unwrap();
        let grads = param_grads(&g, l, &[&b, &pb, &sb]);
        assert!(grads[0].iter().all(|&v| v == 0.0));
        assert!(grads[1].iter().any(|&v| v != 0.0));
        assert!(grads[2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_curriculum_weight_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let buf = toy_buffer(&mut rng);
        let base = WorldModel::new(&small(), 3, 1, &mut rng);
        let ph_cfg = PhConfig { dim: 2, hamiltonian_hidden: vec![8], ..PhConfig::default() };
        let sched = CurriculumSchedule { lambda_max: 1.0, warmup_steps: 100, total_steps: 200 };
        let mut reg = PhRegularizer::new(8, 4, &ph_cfg, 1, sched, 0.05, 1e-3, &mut rng).unwrap();
        let (mut plain, mut with_ph) = (base.clone(), base);
        let reg0 = reg.clone();
        for step in 0..5 {
            let batch = buf.sample(4, 6, None, &mut ChaCha8Rng::seed_from_u64(100 + step)).unwrap();
            let a = plain.update(None, &batch, step, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
            let b = with_ph.update(Some(&mut reg), &batch, step, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
            assert_eq!(a.total, b.total);
            assert_eq!(b.lambda_ph, 0.0);
            assert!(b.ph > 0.0);
        }
        assert_eq!(plain.params.values(), with_ph.params.values());
        assert_eq!(reg.projection.params.values(), reg0.projection.params.values());
    }

    #[test]
    fn overfit_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let buf = toy_buffer(&mut rng);
        let mut wm = WorldModel::new(&small(), 3, 1, &mut rng);
        wm.fit_obs_normalization(&buf.all_obs()).unwrap();
        let batch = buf.sample(4, 6, None, &mut rng).unwrap();
        let first = wm.update(None, &batch, 0, &mut rng).unwrap().total;
        let mut last = first;
        for step in 1..500 {
            last = wm.update(None, &batch, step, &mut rng).unwrap().total;
        }
        assert!(last < first, "{first} -> {last}");
    }
}

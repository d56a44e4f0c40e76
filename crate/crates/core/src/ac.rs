//! Imagination actor-critic with energy and smoothness constraints.
//!
//! Rollouts run in the world model's prior. The actor follows a
//! score-function gradient on normalized λ-return advantages; the critic
//! regresses λ-returns and a slowly moving copy of itself. During fine-tuning
//! the actor also pays `λ_e C_energy + λ_s C_smooth`, evaluated on replayed
//! kinematics with fresh policy actions under a frozen energy model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{param_grads, Activation, Adam, Bound, Graph, Mlp, ParamVector, Tensor, Var};
use crate::energy::{EnergyModel, KinematicHistory};
use crate::error::{dim_check, Error, Result};
use crate::rssm::{normal_noise, WorldModel};
use crate::stats::quantile;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcConfig {
    /// Imagination horizon `H`.
    pub horizon: usize,
    /// `γ = 1 − 1 / discount_horizon`.
    pub discount_horizon: f64,
    pub lambda: f64,
    pub entropy_scale: f64,
    pub alpha_p: f64,
    pub alpha_v: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub clip_norm: f64,
    pub slow_decay: f64,
    pub return_decay: f64,
    pub min_std: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            horizon: 15,
            discount_horizon: 100.0,
            lambda: 0.95,
            entropy_scale: 3e-4,
            alpha_p: 1.0,
            alpha_v: 1.0,
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            clip_norm: 100.0,
            slow_decay: 0.98,
            return_decay: 0.99,
            min_std: 0.1,
        }
    }
}

impl AcConfig {
    pub fn gamma(&self) -> f64 {
        1.0 - 1.0 / self.discount_horizon
    }
}

/// λ-returns for one trajectory. `r[t]` is the reward of the transition out
/// of step `t` (the last entry is unused), `values` includes the bootstrap
/// `V[H−1]`.
pub fn lambda_returns(r: &[f64], cont: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = values.len();
    if h < 2 {
        return Err(Error::Dimension(format!("λ-returns need a horizon of at least 2, got {h}")));
    }
    dim_check(r.len() == h && cont.len() == h, || "rewards, continues and values differ in length".into())?;
    let mut out = vec![0.0; h];
    out[h - 1] = values[h - 1];
    for t in (0..h - 1).rev() {
        out[t] = r[t] + gamma * cont[t] * ((1.0 - lambda) * values[t + 1] + lambda * out[t + 1]);
    }
    Ok(out)
}

/// `w[t] = Π_{τ ≤ t} ĉ_τ γ` with `γ = 1 − 1/horizon`.
pub fn discount_weights(cont: &[f64], horizon: f64) -> Vec<f64> {
    let gamma = 1.0 - 1.0 / horizon;
    let mut acc = 1.0;
    cont.iter()
        .map(|c| {
            acc *= c * gamma;
            acc
        })
        .collect()
}

/// EMA of the 5% and 95% return quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnScaler {
    pub q05_ema: f64,
    pub q95_ema: f64,
    pub decay: f64,
    initialized: bool,
}

impl ReturnScaler {
    pub fn new(decay: f64) -> Self {
        ReturnScaler { q05_ema: 0.0, q95_ema: 0.0, decay, initialized: false }
    }

    /// The first batch initializes both averages directly.
    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        let lo = quantile(returns, 0.05)?;
        let hi = quantile(returns, 0.95)?;
        if self.initialized {
            self.q05_ema = self.decay * self.q05_ema + (1.0 - self.decay) * lo;
            self.q95_ema = self.decay * self.q95_ema + (1.0 - self.decay) * hi;
        } else {
            (self.q05_ema, self.q95_ema, self.initialized) = (lo, hi, true);
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        (self.q95_ema - self.q05_ema).max(1.0)
    }
}

pub fn normalized_advantage(returns: &[f64], values: &[f64], scaler: &ReturnScaler) -> Vec<f64> {
    let s = scaler.scale();
    returns.iter().zip(values).map(|(r, v)| (r - v) / s).collect()
}

/// `log(1 − tanh²u)`, stable for large `|u|`.
fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Tanh-squashed diagonal Gaussian policy over `[−1, 1]^d_a`, with
/// `σ = σ_min + (1 − σ_min)·sigmoid(raw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub params: ParamVector,
    net: Mlp,
    d_a: usize,
    min_std: f64,
}

impl Policy {
    pub fn new(feat_dim: usize, d_a: usize, hidden: &[usize], min_std: f64, rng: &mut impl Rng) -> Self {
        let mut params = ParamVector::new();
        let mut dims = vec![feat_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * d_a);
        let net = Mlp::new(&mut params, "policy", &dims, Activation::Tanh, rng);
        net.scale_output(&mut params, 0.1);
        Policy { params, net, d_a, min_std }
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Pre-squash mean and standard deviation, each `d_a x B`.
    pub fn dist_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>) -> (Var<'g>, Var<'g>) {
        let out = self.net.forward(b, feat);
        let std = out.slice_rows(self.d_a, self.d_a).sigmoid().scale(1.0 - self.min_std).add_scalar(self.min_std);
        (out.slice_rows(0, self.d_a), std)
    }

    /// Reparameterized squashed action `tanh(μ + σ ε)`.
    pub fn action_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>, noise: Var<'g>) -> Var<'g> {
        let (m, s) = self.dist_graph(b, feat);
        (m + s * noise).tanh()
    }

    /// Per-sample `log π(tanh u | s)` and base-Gaussian entropy, each `1 x B`.
    pub fn log_prob_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>, u: &Tensor) -> (Var<'g>, Var<'g>) {
        let g = feat.graph();
        let (m, s) = self.dist_graph(b, feat);
        let jac = g.constant(u.map(log_tanh_jacobian));
        let z = (g.constant(u.clone()) - m) / s;
        let logp = (z.square().scale(-0.5) - s.ln() - jac).add_scalar(-HALF_LOG_2PI).sum_rows();
        let entropy = s.ln().add_scalar(0.5 + HALF_LOG_2PI).sum_rows();
        (logp, entropy)
    }

    /// Samples `(u, tanh u)` for a batch of features.
    pub fn sample(&self, feat: &Tensor, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let (m, s) = self.dist_graph(&b, g.constant(feat.clone()));
        let noise = g.constant(normal_noise(self.d_a, feat.cols(), rng));
        let u = (*(m + s * noise).value()).clone();
        let a = u.map(f64::tanh);
        (u, a)
    }

    /// Deterministic action `tanh μ`.
    pub fn mode(&self, feat: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let (m, _) = self.dist_graph(&b, g.constant(Tensor::col(feat)));
        m.value().data().iter().map(|x| x.tanh()).collect()
    }
}

/// Critic with a unit-variance Gaussian head and an EMA copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub params: ParamVector,
    pub slow: ParamVector,
    net: Mlp,
}

impl Critic {
    pub fn new(feat_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamVector::new();
        let mut dims = vec![feat_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = Mlp::new(&mut params, "critic", &dims, Activation::Tanh, rng);
        net.scale_output(&mut params, 0.1);
        Critic { slow: params.clone(), params, net }
    }

    pub fn value_graph<'g>(&self, b: &Bound<'g>, feat: Var<'g>) -> Var<'g> {
        self.net.forward(b, feat)
    }

    fn eval(&self, pv: &ParamVector, feat: &Tensor) -> Tensor {
        let g = Graph::new();
        let b = pv.bind_frozen(&g);
        (*self.net.forward(&b, g.constant(feat.clone())).value()).clone()
    }

    pub fn values(&self, feat: &Tensor) -> Tensor {
        self.eval(&self.params, feat)
    }

    pub fn slow_values(&self, feat: &Tensor) -> Tensor {
        self.eval(&self.slow, feat)
    }

    pub fn update_slow(&mut self, decay: f64) {
        for (s, f) in self.slow.values_mut().iter_mut().zip(self.params.values()) {
            *s = decay * *s + (1.0 - decay) * f;
        }
    }
}

/// `H` imagined steps for a batch of `B` start states; each entry is one
/// time step with one column per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedRollout {
    pub feats: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    /// Reward of the transition out of each step; the last one is zero.
    pub rewards: Vec<Tensor>,
    pub continues: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.feats.len()
    }

    pub fn batch_size(&self) -> usize {
        self.feats.first().map(|f| f.cols()).unwrap_or(0)
    }

    fn column(seq: &[Tensor], c: usize) -> Vec<f64> {
        seq.iter().map(|t| t.get(0, c)).collect()
    }

    /// λ-returns, `H x B` as one vector per time step.
    pub fn lambda_returns(&self, gamma: f64, lambda: f64) -> Result<Vec<Vec<f64>>> {
        let (h, n) = (self.horizon(), self.batch_size());
        let mut out = vec![vec![0.0; n]; h];
        for c in 0..n {
            let r = Self::column(&self.rewards, c);
            let k = Self::column(&self.continues, c);
            let v = Self::column(&self.values, c);
            for (t, x) in lambda_returns(&r, &k, &v, gamma, lambda)?.into_iter().enumerate() {
                out[t][c] = x;
            }
        }
        Ok(out)
    }
}

/// Rolls the prior forward from `(h, z)` under the policy. Continuation
/// flags are constant one (no terminal states in these tasks).
pub fn imagine(
    wm: &WorldModel,
    policy: &Policy,
    critic: &Critic,
    start_h: &Tensor,
    start_z: &Tensor,
    horizon: usize,
    rng: &mut impl Rng,
) -> ImaginedRollout {
    let n = start_h.cols();
    let g = Graph::new();
    let wb = wm.params.bind_frozen(&g);
    let mut h = g.constant(start_h.clone());
    let mut z = g.constant(start_z.clone());
    let mut out = ImaginedRollout {
        feats: Vec::with_capacity(horizon),
        u: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        continues: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let feat = g.concat_rows(&[h, z]);
        let fv = (*feat.value()).clone();
        let (u, a) = policy.sample(&fv, rng);
        out.values.push(critic.values(&fv));
        out.continues.push(Tensor::filled(1, n, 1.0));
        out.feats.push(fv);
        if t + 1 < horizon {
            h = wm.recurrent_graph(&wb, h, z, g.constant(a.clone()));
            let (pm, ps) = wm.prior_graph(&wb, h);
            z = pm + ps.exp() * g.constant(normal_noise(wm.stoch(), n, rng));
            let next = g.concat_rows(&[h, z]);
            out.rewards.push((*wm.reward_graph(&wb, next).value()).clone());
        } else {
            out.rewards.push(Tensor::zeros(1, n));
        }
        out.u.push(u);
        out.actions.push(a);
    }
    out
}

/// Energy after applying each action column of `a` to its own sample.
pub trait ActionHamiltonian {
    fn d_a(&self) -> usize;
    fn energy_graph<'g>(&self, g: &'g Graph, a: Var<'g>) -> Result<Var<'g>>;
}

/// The learned `H_next(q, a)` at a batch of fixed kinematic windows.
pub struct EnergyAtHistories<'m> {
    model: &'m EnergyModel,
    input: Tensor,
    q_t: Tensor,
    dt: f64,
}

impl<'m> EnergyAtHistories<'m> {
    pub fn new(model: &'m EnergyModel, hists: &[KinematicHistory], dt: f64) -> Result<Self> {
        let refs: Vec<&KinematicHistory> = hists.iter().collect();
        Ok(EnergyAtHistories { model, input: model.history_input(&refs)?, q_t: model.last_coordinates(&refs), dt })
    }

    pub fn batch_size(&self) -> usize {
        self.q_t.cols()
    }
}

impl ActionHamiltonian for EnergyAtHistories<'_> {
    fn d_a(&self) -> usize {
        self.model.d_a()
    }

    fn energy_graph<'g>(&self, g: &'g Graph, a: Var<'g>) -> Result<Var<'g>> {
        let b = self.model.params.bind_frozen(g);
        let nodes = self.model.next_energy_graph(&b, g.constant(self.input.clone()), g.constant(self.q_t.clone()), a, self.dt)?;
        Ok(nodes.h_next)
    }
}

/// Constraint values and their derivatives with respect to each action
/// column (derivatives of the batch means).
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintEval {
    pub c_energy: f64,
    pub c_smooth: f64,
    pub per_sample_energy: Vec<f64>,
    pub per_sample_smooth: Vec<f64>,
    pub grad_energy: Tensor,
    pub grad_smooth: Tensor,
}

/// `C_energy = mean (∇_a Hᵀ a)²` and `C_smooth = mean aᵀ ∇²_a H a` at the
/// action batch `a` (`d_a x B`).
pub fn constraint_terms<H: ActionHamiltonian>(ham: &H, a: &Tensor) -> Result<ConstraintEval> {
    dim_check(a.rows() == ham.d_a(), || format!("actions have {} rows, expected {}", a.rows(), ham.d_a()))?;
    let n = a.cols() as f64;
    let g = Graph::new();
    let a_eval = g.leaf(a.clone());
    let a_dir = g.leaf(a.clone());
    let h = ham.energy_graph(&g, a_eval)?;
    let ga = g.grad(h.sum(), &[a_eval])[0];
    let energy = (ga * a_dir).sum_rows().square();
    let hv = g.grad((ga * a_dir).sum(), &[a_eval])[0];
    let smooth = (hv * a_dir).sum_rows();
    let de = g.backward(energy.sum(), &[a_eval, a_dir]);
    let ds = g.backward(smooth.sum(), &[a_eval, a_dir]);
    let combine = |d: &[Tensor]| d[0].zip_map(&d[1], |x, y| (x + y) / n);
    let per_e = energy.value().data().to_vec();
    let per_s = smooth.value().data().to_vec();
    let eval = ConstraintEval {
        c_energy: per_e.iter().sum::<f64>() / n,
        c_smooth: per_s.iter().sum::<f64>() / n,
        per_sample_energy: per_e,
        per_sample_smooth: per_s,
        grad_energy: combine(&de),
        grad_smooth: combine(&ds),
    };
    if !(eval.c_energy.is_finite() && eval.c_smooth.is_finite()) {
        return Err(Error::Numerical("constraint values are not finite".into()));
    }
    Ok(eval)
}

pub fn energy_constraint<H: ActionHamiltonian>(ham: &H, a: &Tensor) -> Result<f64> {
    Ok(constraint_terms(ham, a)?.c_energy)
}

pub fn smoothness_constraint<H: ActionHamiltonian>(ham: &H, a: &Tensor) -> Result<f64> {
    Ok(constraint_terms(ham, a)?.c_smooth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualState {
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub eps_e: f64,
    pub eps_s: f64,
    pub eta_lambda: f64,
    /// Each constraint enters as `(C − ε) / scale`; 1 keeps raw units.
    #[serde(default = "unit")]
    pub scale_e: f64,
    #[serde(default = "unit")]
    pub scale_s: f64,
}

fn unit() -> f64 {
    1.0
}

impl DualState {
    pub fn new(eps_e: f64, eps_s: f64, eta_lambda: f64) -> Self {
        DualState { lambda_e: 0.0, lambda_s: 0.0, eps_e, eps_s, eta_lambda, scale_e: 1.0, scale_s: 1.0 }
    }

    /// Sets the constraint scales; nonpositive or non-finite values fall back to 1.
    pub fn with_scales(mut self, scale_e: f64, scale_s: f64) -> Self {
        let ok = |s: f64| if s.is_finite() && s > 0.0 { s } else { 1.0 };
        (self.scale_e, self.scale_s) = (ok(scale_e), ok(scale_s));
        self
    }

    /// Multipliers on the raw constraint values.
    pub fn effective(&self) -> (f64, f64) {
        (self.lambda_e / self.scale_e, self.lambda_s / self.scale_s)
    }
}

/// Projected dual ascent on both multipliers.
pub fn dual_update(dual: &mut DualState, c_energy: f64, c_smooth: f64) {
    let le = (dual.lambda_e + dual.eta_lambda * (c_energy - dual.eps_e) / dual.scale_e).max(0.0);
    let ls = (dual.lambda_s + dual.eta_lambda * (c_smooth - dual.eps_s) / dual.scale_s).max(0.0);
    (dual.lambda_e, dual.lambda_s) = (le, ls);
}

pub fn total_objective(
    l_actor: f64,
    l_critic: f64,
    dual: &DualState,
    c_energy: f64,
    c_smooth: f64,
    alpha_p: f64,
    alpha_v: f64,
) -> f64 {
    let (le, ls) = dual.effective();
    alpha_p * l_actor + alpha_v * l_critic + le * (c_energy - dual.eps_e) + ls * (c_smooth - dual.eps_s)
}

/// `Σ_t sg(w_t)(−log π sg(Â_t) − η H_t)` averaged over the batch, for
/// `t < H − 1`.
pub fn actor_loss<'g>(
    policy: &Policy,
    b: &Bound<'g>,
    rollout: &ImaginedRollout,
    adv: &[Vec<f64>],
    weights: &[Vec<f64>],
    entropy_scale: f64,
) -> (Var<'g>, f64) {
    let g = b.vars()[0].graph();
    let n = rollout.batch_size() as f64;
    let mut loss = g.constant(Tensor::scalar(0.0));
    let mut ent_sum = 0.0;
    for t in 0..rollout.horizon().saturating_sub(1) {
        let feat = g.constant(rollout.feats[t].clone());
        let (logp, ent) = policy.log_prob_graph(b, feat, &rollout.u[t]);
        ent_sum += ent.value().sum();
        let a = g.constant(Tensor::new(1, adv[t].len(), adv[t].clone()));
        let w = g.constant(Tensor::new(1, weights[t].len(), weights[t].clone()));
        loss = loss + ((-(logp * a) - ent.scale(entropy_scale)) * w).sum();
    }
    let steps = (rollout.horizon().saturating_sub(1) as f64 * n).max(1.0);
    (loss.scale(1.0 / n), ent_sum / steps)
}

/// Weighted Gaussian NLL of the critic against the λ-return and the slow
/// critic, over all `H` steps, averaged over the batch.
pub fn critic_loss<'g>(
    critic: &Critic,
    b: &Bound<'g>,
    rollout: &ImaginedRollout,
    returns: &[Vec<f64>],
    slow: &[Tensor],
    weights: &[Vec<f64>],
) -> Var<'g> {
    let g = b.vars()[0].graph();
    let n = rollout.batch_size() as f64;
    let mut loss = g.constant(Tensor::scalar(0.0));
    for t in 0..rollout.horizon() {
        let v = critic.value_graph(b, g.constant(rollout.feats[t].clone()));
        let r = g.constant(Tensor::new(1, returns[t].len(), returns[t].clone()));
        let s = g.constant(slow[t].clone());
        let nll = ((v - r).square() + (v - s).square()).scale(0.5).add_scalar(2.0 * HALF_LOG_2PI);
        let w = g.constant(Tensor::new(1, weights[t].len(), weights[t].clone()));
        loss = loss + (nll * w).sum();
    }
    loss.scale(1.0 / n)
}

/// Inputs of the constrained part of an update.
pub struct ConstraintInput<'a, R: Rng> {
    pub energy: &'a EnergyModel,
    pub feats: &'a Tensor,
    pub hists: &'a [KinematicHistory],
    pub dt: f64,
    pub dual: &'a mut DualState,
    /// Noise source for the reparameterized constraint actions.
    pub rng: &'a mut R,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcReport {
    pub return_estimate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub c_energy: f64,
    pub c_smooth: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub cfg: AcConfig,
    pub policy: Policy,
    pub critic: Critic,
    pub actor_adam: Adam,
    pub critic_adam: Adam,
    pub scaler: ReturnScaler,
}

impl ActorCritic {
    pub fn new(cfg: &AcConfig, feat_dim: usize, d_a: usize, rng: &mut impl Rng) -> Self {
        let policy = Policy::new(feat_dim, d_a, &cfg.hidden, cfg.min_std, rng);
        let critic = Critic::new(feat_dim, &cfg.hidden, rng);
        ActorCritic {
            actor_adam: Adam::new(policy.params.len(), cfg.actor_lr).with_clip(cfg.clip_norm),
            critic_adam: Adam::new(critic.params.len(), cfg.critic_lr).with_clip(cfg.clip_norm),
            scaler: ReturnScaler::new(cfg.return_decay),
            cfg: cfg.clone(),
            policy,
            critic,
        }
    }

    /// Samples reparameterized policy actions at `feats` and evaluates both
    /// constraints under the frozen energy model.
    pub fn evaluate_constraints<R: Rng>(
        &self,
        energy: &EnergyModel,
        feats: &Tensor,
        hists: &[KinematicHistory],
        dt: f64,
        rng: &mut R,
    ) -> Result<(Tensor, ConstraintEval)> {
        let noise = normal_noise(self.policy.d_a(), feats.cols(), rng);
        let g = Graph::new();
        let b = self.policy.params.bind_frozen(&g);
        let a = (*self.policy.action_graph(&b, g.constant(feats.clone()), g.constant(noise.clone())).value()).clone();
        let ham = EnergyAtHistories::new(energy, hists, dt)?;
        Ok((noise, constraint_terms(&ham, &a)?))
    }

    /// One imagination update from start states `(h, z)`.
    pub fn update<R: Rng>(
        &mut self,
        wm: &WorldModel,
        start_h: &Tensor,
        start_z: &Tensor,
        rng: &mut impl Rng,
        constraint: Option<ConstraintInput<'_, R>>,
    ) -> Result<AcReport> {
        let cfg = &self.cfg;
        let rollout = imagine(wm, &self.policy, &self.critic, start_h, start_z, cfg.horizon, rng);
        let returns = rollout.lambda_returns(cfg.gamma(), cfg.lambda)?;
        let all: Vec<f64> = returns.iter().flatten().copied().collect();
        self.scaler.update(&all)?;
        let (h, n) = (rollout.horizon(), rollout.batch_size());
        let adv: Vec<Vec<f64>> =
            (0..h).map(|t| normalized_advantage(&returns[t], rollout.values[t].data(), &self.scaler)).collect();
        let mut weights = vec![vec![0.0; n]; h];
        for c in 0..n {
            let cont: Vec<f64> = rollout.continues.iter().map(|k| k.get(0, c)).collect();
            for (t, w) in discount_weights(&cont, cfg.discount_horizon).into_iter().enumerate() {
                weights[t][c] = w;
            }
        }
        let slow: Vec<Tensor> = rollout.feats.iter().map(|f| self.critic.slow_values(f)).collect();

        let mut report = AcReport { return_estimate: crate::stats::mean(&returns[0]), ..AcReport::default() };
        let g = Graph::new();
        let pb = self.policy.params.bind(&g);
        let (la, entropy) = actor_loss(&self.policy, &pb, &rollout, &adv, &weights, cfg.entropy_scale);
        let mut primal = la.scale(cfg.alpha_p);
        let mut pending_dual = None;
        if let Some(ci) = constraint {
            let (noise, eval) = self.evaluate_constraints(ci.energy, ci.feats, ci.hists, ci.dt, ci.rng)?;
            let (le, ls) = ci.dual.effective();
            let coef = eval.grad_energy.zip_map(&eval.grad_smooth, |e, s| le * e + ls * s);
            let a = self.policy.action_graph(&pb, g.constant(ci.feats.clone()), g.constant(noise));
            primal = primal + (g.constant(coef) * a).sum();
            report.c_energy = eval.c_energy;
            report.c_smooth = eval.c_smooth;
            report.lambda_e = ci.dual.lambda_e;
            report.lambda_s = ci.dual.lambda_s;
            pending_dual = Some((ci.dual, eval.c_energy, eval.c_smooth));
        }
        let cb = self.critic.params.bind(&g);
        let lc = critic_loss(&self.critic, &cb, &rollout, &returns, &slow, &weights);
        report.actor_loss = la.item();
        report.critic_loss = lc.item();
        report.entropy = entropy;
        if !(report.actor_loss.is_finite() && report.critic_loss.is_finite()) {
            return Err(Error::Numerical(format!("actor-critic loss is not finite: {report:?}")));
        }
        let actor_grad = param_grads(&g, primal, &[&pb]).remove(0);
        let critic_grad = param_grads(&g, lc.scale(cfg.alpha_v), &[&cb]).remove(0);
        self.actor_adam.step(&mut self.policy.params, &actor_grad);
        self.critic_adam.step(&mut self.critic.params, &critic_grad);
        self.critic.update_slow(cfg.slow_decay);
        if let Some((dual, ce, cs)) = pending_dual {
            report.total = total_objective(report.actor_loss, report.critic_loss, dual, ce, cs, cfg.alpha_p, cfg.alpha_v);
            dual_update(dual, ce, cs);
        } else {
            report.total = cfg.alpha_p * report.actor_loss + cfg.alpha_v * report.critic_loss;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        // Weighted mixture of n-step returns, tail weight on the full return.
        let h = v.len();
        (0..h)
            .map(|t| {
                if t == h - 1 {
                    return v[t];
                }
                let nstep = |k: usize| {
                    let mut g = 0.0;
                    let mut disc = 1.0;
                    for i in t..t + k {
                        g += disc * r[i];
                        disc *= gamma * c[i];
                    }
                    g + disc * v[t + k]
                };
                let m = h - 1 - t;
                let mut out = 0.0;
                for k in 1..m {
                    out += (1.0 - lambda) * lambda.powi(k as i32 - 1) * nstep(k);
                }
                out + lambda.powi(m as i32 - 1) * nstep(m)
            })
            .collect()
    }

    #[test]
    fn lambda_return_examples() {
        let r = lambda_returns(&[1.0, 1.0, 0.0], &[1.0; 3], &[0.0, 0.0, 2.0], 0.9, 0.5).unwrap();
        assert!((r[2] - 2.0).abs() < 1e-15);
        assert!((r[1] - 2.8).abs() < 1e-12);
        assert!((r[0] - 2.26).abs() < 1e-12);
        let td = lambda_returns(&[0.5, 0.3, 9.0], &[1.0, 0.5, 1.0], &[1.0, 2.0, 4.0], 0.9, 0.0).unwrap();
        assert!((td[0] - (0.5 + 0.9 * 2.0)).abs() < 1e-15);
        assert!((td[1] - (0.3 + 0.9 * 0.5 * 4.0)).abs() < 1e-15);
        let mc = lambda_returns(&[1.0, 2.0, 0.0], &[1.0; 3], &[7.0, 7.0, 3.0], 0.5, 1.0).unwrap();
        assert!((mc[0] - (1.0 + 0.5 * 2.0 + 0.25 * 3.0)).abs() < 1e-15);
        assert!(lambda_returns(&[1.0], &[1.0], &[1.0], 0.9, 0.5).is_err());
    }

    #[test]
    fn lambda_returns_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let h = rng.random_range(2..=8);
            let r: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (gamma, lambda) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let a = lambda_returns(&r, &c, &v, gamma, lambda).unwrap();
            let b = brute_force(&r, &c, &v, gamma, lambda);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn discount_weight_cases() {
        let w = discount_weights(&[1.0; 4], 16.0);
        assert_eq!(w[0], 0.9375);
        assert_eq!(w[1], 0.87890625);
        let w = discount_weights(&[1.0, 0.0, 1.0, 1.0], 16.0);
        assert_eq!(&w[1..], &[0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..=1.0)).collect();
        let w = discount_weights(&c, 10.0);
        assert!(w.windows(2).all(|p| p[1] <= p[0]) && w.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn scaler_clamps_and_scales() {
        let mut s = ReturnScaler::new(0.99);
        s.update(&[0.0, 0.5]).unwrap();
        assert_eq!(s.scale(), 1.0);
        assert_eq!(normalized_advantage(&[3.0], &[1.0], &s), vec![2.0]);
        let mut s = ReturnScaler::new(0.99);
        s.update(&(0..=100).map(|i| i as f64 * 4.0 / 90.0).collect::<Vec<_>>()).unwrap();
        assert!((s.scale() - 4.0).abs() < 1e-12);
        assert!((normalized_advantage(&[3.0], &[1.0], &s)[0] - 0.5).abs() < 1e-12);
        assert_eq!(normalized_advantage(&[1.0, 2.0], &[1.0, 2.0], &s), vec![0.0, 0.0]);
        let before = s.q95_ema;
        s.update(&[100.0, 100.0]).unwrap();
        assert!((s.q95_ema - (0.99 * before + 0.01 * 100.0)).abs() < 1e-12);
    }

    #[test]
    fn dual_examples_and_projection() {
        let mut d = DualState { lambda_e: 0.5, ..DualState::new(10.0, 1.0, 0.1) };
        dual_update(&mut d, 0.0, 3.0);
        assert_eq!(d.lambda_e, 0.0);
        assert!((d.lambda_s - 0.2).abs() < 1e-15);
        let before = d.lambda_s;
        dual_update(&mut d, 0.0, 1.0);
        assert_eq!(d.lambda_s, before);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            dual_update(&mut d, rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            assert!(d.lambda_e >= 0.0 && d.lambda_s >= 0.0);
        }
        let zero = DualState::new(1.0, 2.0, 0.1);
        assert_eq!(total_objective(1.5, 2.0, &zero, 9.0, 9.0, 1.0, 1.0), 3.5);
        assert_eq!(total_objective(1.5, 2.0, &zero, 0.0, 0.0, 1.0, 0.0), 1.5);

        let mut scaled = DualState::new(1.0, -1.0, 0.1).with_scales(0.5, 0.0);
        assert_eq!(scaled.scale_s, 1.0);
        dual_update(&mut scaled, 2.0, 1.0);
        assert!((scaled.lambda_e - 0.2).abs() < 1e-15 && (scaled.lambda_s - 0.2).abs() < 1e-15);
        assert!((scaled.effective().0 - 0.4).abs() < 1e-15);
        assert!((total_objective(0.0, 0.0, &scaled, 2.0, -1.0, 1.0, 1.0) - 0.4).abs() < 1e-15);
    }

    /// `H = ½ aᵀ K a + cᵀ a` per column, with fixed `K` and `c`.
    struct Quadratic {
        k: Tensor,
        c: Tensor,
    }

    impl ActionHamiltonian for Quadratic {
        fn d_a(&self) -> usize {
            self.k.rows()
        }

        fn energy_graph<'g>(&self, g: &'g Graph, a: Var<'g>) -> Result<Var<'g>> {
            let ka = g.constant(self.k.clone()).matmul(a);
            let c = g.constant(self.c.clone()).broadcast_cols(a.cols());
            Ok(((ka * a).scale(0.5) + c * a).sum_rows())
        }
    }

    #[test]
    fn constraint_examples() {
        let ones = Quadratic { k: Tensor::zeros(2, 2), c: Tensor::col(&[1.0, 1.0]) };
        let e = constraint_terms(&ones, &Tensor::col(&[1.0, -1.0])).unwrap();
        assert_eq!((e.c_energy, e.c_smooth), (0.0, 0.0));
        let x = Quadratic { k: Tensor::zeros(2, 2), c: Tensor::col(&[1.0, 0.0]) };
        assert_eq!(energy_constraint(&x, &Tensor::col(&[2.0, 0.0])).unwrap(), 4.0);
        assert_eq!(energy_constraint(&x, &Tensor::zeros(2, 3)).unwrap(), 0.0);
        let quad = Quadratic { k: Tensor::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]), c: Tensor::zeros(2, 1) };
        assert_eq!(smoothness_constraint(&quad, &Tensor::col(&[1.0, 1.0])).unwrap(), 4.0);
    }

    #[test]
    fn constraint_gradients_match_closed_form() {
        // H = ½ aᵀKa + cᵀa: C_e = ((Ka + c)ᵀ a)², C_s = aᵀKa.
        let k = Tensor::new(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
        let c = Tensor::col(&[0.3, -0.7]);
        let q = Quadratic { k: k.clone(), c: c.clone() };
        let a = Tensor::new(2, 2, vec![0.4, -0.2, 0.9, 0.6]);
        let e = constraint_terms(&q, &a).unwrap();
        for col in 0..2 {
            let av = a.column(col);
            let ka = [k.get(0, 0) * av[0] + k.get(0, 1) * av[1], k.get(1, 0) * av[0] + k.get(1, 1) * av[1]];
            let s = (ka[0] + c.get(0, 0)) * av[0] + (ka[1] + c.get(1, 0)) * av[1];
            for i in 0..2 {
                let de = 2.0 * s * (2.0 * ka[i] + c.get(i, 0)) / 2.0;
                let ds = 2.0 * ka[i] / 2.0;
                assert!((e.grad_energy.get(i, col) - de).abs() < 1e-12);
                assert!((e.grad_smooth.get(i, col) - ds).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Policy::new(3, 2, &[8], 0.1, &mut rng);
        let feat = Tensor::col(&[0.2, -0.4, 0.9]);
        let g = Graph::new();
        let b = p.params.bind_frozen(&g);
        let (m, s) = p.dist_graph(&b, g.constant(feat.clone()));
        let (m, s) = (m.value(), s.value());
        let u = Tensor::col(&[0.3, -1.7]);
        let (lp, ent) = p.log_prob_graph(&b, g.constant(feat), &u);
        let mut want = 0.0;
        let mut want_ent = 0.0;
        for i in 0..2 {
            let (mi, si, ui) = (m.data()[i], s.data()[i], u.data()[i]);
            want += -0.5 * ((ui - mi) / si).powi(2) - si.ln() - HALF_LOG_2PI - (1.0 - ui.tanh().powi(2)).ln();
            want_ent += 0.5 + HALF_LOG_2PI + si.ln();
            assert!((0.1..=1.0).contains(&si));
        }
        assert!((lp.item() - want).abs() < 1e-12);
        assert!((ent.item() - want_ent).abs() < 1e-12);
        assert!((log_tanh_jacobian(40.0) - (2.0 * LN_2 - 80.0)).abs() < 1e-12);
    }

    fn toy_rollout(policy: &Policy, rng: &mut ChaCha8Rng) -> ImaginedRollout {
        let (h, n) = (4, 8);
        let feats: Vec<Tensor> = (0..h).map(|_| normal_noise(3, n, rng)).collect();
        let mut u = Vec::new();
        let mut actions = Vec::new();
        for f in &feats {
            let (uu, aa) = policy.sample(f, rng);
            u.push(uu);
            actions.push(aa);
        }
        ImaginedRollout {
            feats,
            u,
            actions,
            rewards: (0..h).map(|_| normal_noise(1, n, rng)).collect(),
            continues: (0..h).map(|_| Tensor::filled(1, n, 1.0)).collect(),
            values: (0..h).map(|_| normal_noise(1, n, rng)).collect(),
        }
    }

    #[test]
    fn actor_loss_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Policy::new(3, 1, &[8], 0.1, &mut rng);
        let ro = toy_rollout(&p, &mut rng);
        let zeros = vec![vec![0.0; 8]; 4];
        let ones = vec![vec![1.0; 8]; 4];
        let g = Graph::new();
        let b = p.params.bind(&g);
        let (l, _) = actor_loss(&p, &b, &ro, &zeros, &ones, 0.0);
        assert_eq!(l.item(), 0.0);
        assert!(param_grads(&g, l, &[&b])[0].iter().all(|&x| x == 0.0));
        let (l, _) = actor_loss(&p, &b, &ro, &ones, &zeros, 0.1);
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn entropy_bonus_alone_widens_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = Policy::new(3, 1, &[8], 0.1, &mut rng);
        let ro = toy_rollout(&p, &mut rng);
        let zeros = vec![vec![0.0; 8]; 4];
        let ones = vec![vec![1.0; 8]; 4];
        let mut adam = Adam::new(p.params.len(), 1e-2);
        let mean_std = |p: &Policy| {
            let g = Graph::new();
            let b = p.params.bind_frozen(&g);
            p.dist_graph(&b, g.constant(ro.feats[0].clone())).1.value().sum()
        };
        let mut last = mean_std(&p);
        for _ in 0..20 {
            let g = Graph::new();
            let b = p.params.bind(&g);
            let (l, _) = actor_loss(&p, &b, &ro, &zeros, &ones, 1.0);
            let grad = param_grads(&g, l, &[&b]).remove(0);
            adam.step(&mut p.params, &grad);
            let now = mean_std(&p);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn critic_loss_floor_and_slow_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Policy::new(3, 1, &[8], 0.1, &mut rng);
        let critic = Critic::new(3, &[8], &mut rng);
        assert_eq!(critic.params, critic.slow);
        let ro = toy_rollout(&p, &mut rng);
        let v: Vec<Tensor> = ro.feats.iter().map(|f| critic.values(f)).collect();
        let targets: Vec<Vec<f64>> = v.iter().map(|t| t.data().to_vec()).collect();
        let ones = vec![vec![1.0; 8]; 4];
        let g = Graph::new();
        let b = critic.params.bind(&g);
        let l = critic_loss(&critic, &b, &ro, &targets, &v, &ones);
        assert!((l.item() - 4.0 * 2.0 * HALF_LOG_2PI).abs() < 1e-12);
        let l = critic_loss(&critic, &b, &ro, &targets, &v, &vec![vec![0.0; 8]; 4]);
        assert_eq!(l.item(), 0.0);
    }
}

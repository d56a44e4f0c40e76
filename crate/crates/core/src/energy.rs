//! Kinematics-aware energy model over generalized coordinates.
//!
//! Momentum is inferred from a short window of coordinates, the Hamiltonian
//! splits into `V(q) + ½ pᵀ M⁻¹(q) p` with `M⁻¹ = L Lᵀ`, and the `(q, p)`
//! dynamics
//!
//! ```text
//! q̇ = ∇_p H
//! ṗ = −∇_q H − D(q, p) q̇ + G(q) φ(a)
//! ```
//!
//! are stepped with RK4, so `dH/dt = q̇ᵀ G φ(a) − q̇ᵀ D q̇` holds exactly in
//! continuous time. The model works in normalized energy units; an affine
//! calibration maps back to joules.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{transpose_perm, Activation, Adam, Bound, Graph, Mlp, ParamVector, Tcn, Tensor, Var};
use crate::envsim::{EnvSpec, Trajectory};
use crate::error::{dim_check, Error, Result};
use crate::phcore::{rk4_step, tril_indices, tril_len};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// History length `k`; windows hold `k + 1` coordinate rows.
    pub window: usize,
    pub hidden: Vec<usize>,
    pub tcn_hidden: usize,
    pub tcn_dilations: Vec<usize>,
    pub action_hidden: usize,
    /// When false, `D ≡ 0`.
    pub dissipation: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            window: 4,
            hidden: vec![64, 64],
            tcn_hidden: 32,
            tcn_dilations: vec![1, 2],
            action_hidden: 32,
            dissipation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicHistory {
    /// `k + 1` time-ordered rows of `d_q` coordinates.
    pub q_window: Vec<Vec<f64>>,
    pub dt: f64,
}

impl KinematicHistory {
    pub fn last(&self) -> &[f64] {
        self.q_window.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `joules = scale * H + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { scale: 1.0, offset: 0.0 }
    }
}

impl Calibration {
    pub fn to_joules(&self, h: f64) -> f64 {
        self.scale * h + self.offset
    }

    pub fn to_model(&self, e: f64) -> f64 {
        (e - self.offset) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyPrediction {
    pub h_t: f64,
    pub h_next: f64,
    pub p_t: Vec<f64>,
    pub p_next: Vec<f64>,
    pub p_work: f64,
    pub p_diss: f64,
}

/// Graph nodes of one batched next-energy evaluation.
#[derive(Clone, Copy)]
pub struct EnergyNodes<'g> {
    pub p_t: Var<'g>,
    pub h_t: Var<'g>,
    pub q_next: Var<'g>,
    pub p_next: Var<'g>,
    pub h_next: Var<'g>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub params: ParamVector,
    d_q: usize,
    d_a: usize,
    window: usize,
    angle_mask: Vec<bool>,
    /// Divisors applied to the finite-difference velocity channels.
    velocity_scale: Vec<f64>,
    dissipation: bool,
    momentum: Tcn,
    potential: Mlp,
    mass_factor: Mlp,
    port: Mlp,
    damping: Mlp,
    action_encoder: Mlp,
    pub calibration: Calibration,
}

fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x - two_pi * (x / two_pi).round()
}

impl EnergyModel {
    pub fn new(cfg: &EnergyConfig, angle_mask: &[bool], d_a: usize, rng: &mut impl Rng) -> Result<Self> {
        let d_q = angle_mask.len();
        dim_check(d_q > 0 && d_a > 0, || "energy model needs coordinates and actions".into())?;
        dim_check(cfg.window >= 1, || "history window must be at least 1".into())?;
        let reach: usize = cfg.tcn_dilations.iter().sum();
        dim_check(reach < cfg.window, || {
            format!("dilations {:?} need a window longer than {}", cfg.tcn_dilations, cfg.window)
        })?;
        let feat = angle_mask.iter().map(|&a| if a { 2 } else { 1 }).sum::<usize>();
        let mut params = ParamVector::new();
        let dims = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend_from_slice(&cfg.hidden);
            d.push(output);
            d
        };
        let momentum = Tcn::new(
            &mut params,
            "energy.momentum",
            cfg.window,
            feat + d_q,
            cfg.tcn_hidden,
            &cfg.tcn_dilations,
            d_q,
            Activation::Tanh,
            rng,
        );
        let potential = Mlp::new(&mut params, "energy.potential", &dims(feat, 1), Activation::Tanh, rng);
        let mass_factor = Mlp::new(&mut params, "energy.mass", &dims(feat, tril_len(d_q)), Activation::Tanh, rng);
        let port = Mlp::new(&mut params, "energy.port", &dims(feat, d_q * d_a), Activation::Tanh, rng);
        let damping = Mlp::new(&mut params, "energy.damping", &dims(feat + d_q, d_q), Activation::Tanh, rng);
        let action_encoder =
            Mlp::new(&mut params, "energy.action", &[d_a, cfg.action_hidden, d_a], Activation::Tanh, rng);
        Ok(EnergyModel {
            params,
            d_q,
            d_a,
            window: cfg.window,
            angle_mask: angle_mask.to_vec(),
            velocity_scale: vec![1.0; d_q],
            dissipation: cfg.dissipation,
            momentum,
            potential,
            mass_factor,
            port,
            damping,
            action_encoder,
            calibration: Calibration::default(),
        })
    }

    pub fn d_q(&self) -> usize {
        self.d_q
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn has_dissipation(&self) -> bool {
        self.dissipation
    }

    pub fn set_dissipation(&mut self, on: bool) {
        self.dissipation = on;
    }

    pub fn velocity_scale(&self) -> &[f64] {
        &self.velocity_scale
    }

    pub fn set_velocity_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        dim_check(scale.len() == self.d_q, || "velocity scale length".into())?;
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Numerical("velocity scales must be positive".into()));
        }
        self.velocity_scale = scale;
        Ok(())
    }

    pub fn momentum_net(&self) -> &Tcn {
        &self.momentum
    }

    pub fn potential_net(&self) -> &Mlp {
        &self.potential
    }

    pub fn mass_net(&self) -> &Mlp {
        &self.mass_factor
    }

    pub fn port_net(&self) -> &Mlp {
        &self.port
    }

    pub fn damping_net(&self) -> &Mlp {
        &self.damping
    }

    pub fn action_net(&self) -> &Mlp {
        &self.action_encoder
    }

    /// Angles as `(cos, sin)`, other coordinates unchanged.
    pub fn q_features<'g>(&self, q: Var<'g>) -> Var<'g> {
        let parts: Vec<Var<'g>> = self
            .angle_mask
            .iter()
            .enumerate()
            .flat_map(|(i, &angle)| {
                let row = q.row(i);
                if angle {
                    vec![row.cos(), row.sin()]
                } else {
                    vec![row]
                }
            })
            .collect();
        q.graph().concat_rows(&parts)
    }

    fn q_features_values(&self, q: &[f64], out: &mut Vec<f64>) {
        for (&v, &angle) in q.iter().zip(&self.angle_mask) {
            if angle {
                out.push(v.cos());
                out.push(v.sin());
            } else {
                out.push(v);
            }
        }
    }

    fn check_history(&self, h: &KinematicHistory) -> Result<()> {
        dim_check(h.q_window.len() == self.window + 1, || {
            format!("history has {} rows, expected {}", h.q_window.len(), self.window + 1)
        })?;
        dim_check(h.q_window.iter().all(|r| r.len() == self.d_q), || "history row width".into())?;
        if !(h.dt > 0.0) || h.q_window.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("history must be finite with positive dt".into()));
        }
        Ok(())
    }

    /// Momentum-net input for a batch of windows: for each of the `k` steps,
    /// the coordinate features followed by the scaled finite-difference
    /// velocity (angle differences wrapped to `(−π, π]`).
    pub fn history_input(&self, hists: &[&KinematicHistory]) -> Result<Tensor> {
        let batch = hists.len();
        let rows = self.momentum.input_rows();
        let mut data = vec![0.0; rows * batch];
        let mut col = Vec::with_capacity(rows);
        for (b, h) in hists.iter().enumerate() {
            self.check_history(h)?;
            col.clear();
            for s in 1..=self.window {
                self.q_features_values(&h.q_window[s], &mut col);
                for i in 0..self.d_q {
                    let mut d = h.q_window[s][i] - h.q_window[s - 1][i];
                    if self.angle_mask[i] {
                        d = wrap_angle(d);
                    }
                    col.push(d / h.dt / self.velocity_scale[i]);
                }
            }
            for (r, v) in col.iter().enumerate() {
                data[r * batch + b] = *v;
            }
        }
        Ok(Tensor::new(rows, batch, data))
    }

    pub fn last_coordinates(&self, hists: &[&KinematicHistory]) -> Tensor {
        let cols: Vec<&[f64]> = hists.iter().map(|h| h.last()).collect();
        Tensor::from_columns(self.d_q, &cols)
    }

    pub fn momentum_graph<'g>(&self, bound: &Bound<'g>, input: Var<'g>) -> Var<'g> {
        self.momentum.forward(bound, input)
    }

    /// Row-major `L` per column, `(d_q² x B)`.
    fn factor<'g>(&self, bound: &Bound<'g>, feats: Var<'g>) -> Var<'g> {
        let n = self.d_q;
        let raw = self.mass_factor.forward(bound, feats);
        let tril = tril_indices(n);
        let (mut diag_src, mut diag_dst, mut off_src, mut off_dst) = (vec![], vec![], vec![], vec![]);
        for (k, &pos) in tril.iter().enumerate() {
            if pos / n == pos % n {
                diag_src.push(k);
                diag_dst.push(pos);
            } else {
                off_src.push(k);
                off_dst.push(pos);
            }
        }
        let diag = raw.gather_rows(diag_src).softplus().scatter_rows(diag_dst, n * n);
        if off_src.is_empty() {
            diag
        } else {
            diag + raw.gather_rows(off_src).scatter_rows(off_dst, n * n)
        }
    }

    /// `M⁻¹(q)` per column, `(d_q² x B)`.
    pub fn inverse_mass_graph<'g>(&self, bound: &Bound<'g>, q: Var<'g>) -> Var<'g> {
        let n = self.d_q;
        let l = self.factor(bound, self.q_features(q));
        let lt = l.gather_rows(transpose_perm(n, n));
        // column j of M⁻¹ = L (Lᵀ e_j); assembled by batched products
        let cols: Vec<Var<'g>> = (0..n)
            .map(|j| {
                let e = q.graph().constant(unit_columns(n, j, q.cols()));
                l.batch_matvec(lt.batch_matvec(e))
            })
            .collect();
        let stacked = q.graph().concat_rows(&cols);
        // stacked is column-major blocks; reorder to row-major
        stacked.gather_rows(transpose_perm(n, n))
    }

    pub fn hamiltonian_graph<'g>(&self, bound: &Bound<'g>, q: Var<'g>, p: Var<'g>) -> Var<'g> {
        let n = self.d_q;
        let feats = self.q_features(q);
        let l = self.factor(bound, feats);
        let ltp = l.gather_rows(transpose_perm(n, n)).batch_matvec(p);
        self.potential.forward(bound, feats) + ltp.square().sum_rows().scale(0.5)
    }

    /// `M⁻¹(q) p` through the factor.
    pub fn velocity_explicit_graph<'g>(&self, bound: &Bound<'g>, q: Var<'g>, p: Var<'g>) -> Var<'g> {
        let n = self.d_q;
        let l = self.factor(bound, self.q_features(q));
        l.batch_matvec(l.gather_rows(transpose_perm(n, n)).batch_matvec(p))
    }

    pub fn damping_graph<'g>(&self, bound: &Bound<'g>, q: Var<'g>, p: Var<'g>) -> Var<'g> {
        let input = q.graph().concat_rows(&[self.q_features(q), p]);
        self.damping.forward(bound, input).softplus()
    }

    /// `G(q)` per column, `(d_q·d_a x B)` row-major.
    pub fn port_graph<'g>(&self, bound: &Bound<'g>, q: Var<'g>) -> Var<'g> {
        self.port.forward(bound, self.q_features(q))
    }

    pub fn encode_action<'g>(&self, bound: &Bound<'g>, a: Var<'g>) -> Var<'g> {
        self.action_encoder.forward(bound, a)
    }

    /// `(∇_q H, ∇_p H, f_q, f_p)` for an encoded action `a_enc`.
    pub fn field_graph<'g>(
        &self,
        bound: &Bound<'g>,
        q: Var<'g>,
        p: Var<'g>,
        a_enc: Var<'g>,
    ) -> (Var<'g>, Var<'g>, Var<'g>, Var<'g>) {
        let g = q.graph();
        let h = self.hamiltonian_graph(bound, q, p);
        let grads = g.grad(h.sum(), &[q, p]);
        let (dq, dp) = (grads[0], grads[1]);
        let port = self.port_graph(bound, q).batch_matvec(a_enc);
        let mut fp = port - dq;
        if self.dissipation {
            fp = fp - self.damping_graph(bound, q, p) * dp;
        }
        (dq, dp, dp, fp)
    }

    pub fn ph_step_graph<'g>(
        &self,
        bound: &Bound<'g>,
        q: Var<'g>,
        p: Var<'g>,
        a: Var<'g>,
        dt: f64,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let a_enc = self.encode_action(bound, a);
        let out = rk4_step(&[q, p], dt, |s| {
            let (_, _, fq, fp) = self.field_graph(bound, s[0], s[1], a_enc);
            vec![fq, fp]
        })?;
        Ok((out[0], out[1]))
    }

    /// Momentum inference, RK4 step and both Hamiltonians for a batch.
    pub fn next_energy_graph<'g>(
        &self,
        bound: &Bound<'g>,
        input: Var<'g>,
        q_t: Var<'g>,
        a: Var<'g>,
        dt: f64,
    ) -> Result<EnergyNodes<'g>> {
        let p_t = self.momentum_graph(bound, input);
        let h_t = self.hamiltonian_graph(bound, q_t, p_t);
        let (q_next, p_next) = self.ph_step_graph(bound, q_t, p_t, a, dt)?;
        let h_next = self.hamiltonian_graph(bound, q_next, p_next);
        Ok(EnergyNodes { p_t, h_t, q_next, p_next, h_next })
    }

    fn check_qp(&self, q: &[f64], p: &[f64]) -> Result<()> {
        dim_check(q.len() == self.d_q && p.len() == self.d_q, || {
            format!("expected {} coordinates and momenta, got {} and {}", self.d_q, q.len(), p.len())
        })
    }

    fn check_action(&self, a: &[f64]) -> Result<()> {
        dim_check(a.len() == self.d_a, || format!("action has {} entries, expected {}", a.len(), self.d_a))
    }

    pub fn infer_momentum(&self, hist: &KinematicHistory) -> Result<Vec<f64>> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let input = g.constant(self.history_input(&[hist])?);
        Ok(self.momentum_graph(&b, input).value().data().to_vec())
    }

    pub fn inverse_mass(&self, q: &[f64]) -> Result<Tensor> {
        dim_check(q.len() == self.d_q, || "coordinate dimension".into())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let m = self.inverse_mass_graph(&b, g.constant(Tensor::col(q))).value();
        Ok(Tensor::new(self.d_q, self.d_q, m.data().to_vec()))
    }

    pub fn hamiltonian(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        self.check_qp(q, p)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        Ok(self.hamiltonian_graph(&b, g.constant(Tensor::col(q)), g.constant(Tensor::col(p))).item())
    }

    /// `(M⁻¹ p, ∇_p H)`; the two must agree.
    pub fn generalized_velocity(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_qp(q, p)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let qv = g.constant(Tensor::col(q));
        let pv = g.leaf(Tensor::col(p));
        let explicit = self.velocity_explicit_graph(&b, qv, pv).value().data().to_vec();
        let h = self.hamiltonian_graph(&b, qv, pv);
        let auto = g.backward(h, &[pv]).remove(0).into_data();
        Ok((explicit, auto))
    }

    /// `(P_work, P_diss)` with `q̇ = M⁻¹ p`.
    pub fn power_terms(&self, q: &[f64], p: &[f64], a: &[f64]) -> Result<(f64, f64)> {
        self.check_qp(q, p)?;
        self.check_action(a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let (qv, pv) = (g.constant(Tensor::col(q)), g.constant(Tensor::col(p)));
        let qdot = self.velocity_explicit_graph(&b, qv, pv);
        let a_enc = self.encode_action(&b, g.constant(Tensor::col(a)));
        let work = qdot.dot(self.port_graph(&b, qv).batch_matvec(a_enc)).item();
        let diss = if self.dissipation { qdot.dot(self.damping_graph(&b, qv, pv) * qdot).item() } else { 0.0 };
        Ok((work, diss))
    }

    /// `(∇_q H, ∇_p H, f_q, f_p)` at a point.
    pub fn vector_field(&self, q: &[f64], p: &[f64], a: &[f64]) -> Result<[Vec<f64>; 4]> {
        self.check_qp(q, p)?;
        self.check_action(a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let a_enc = self.encode_action(&b, g.constant(Tensor::col(a)));
        let (dq, dp, fq, fp) = self.field_graph(&b, g.leaf(Tensor::col(q)), g.leaf(Tensor::col(p)), a_enc);
        let v = |x: Var<'_>| x.value().data().to_vec();
        Ok([v(dq), v(dp), v(fq), v(fp)])
    }

    pub fn ph_step(&self, q: &[f64], p: &[f64], a: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_qp(q, p)?;
        self.check_action(a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let (qn, pn) = self.ph_step_graph(
            &b,
            g.leaf(Tensor::col(q)),
            g.leaf(Tensor::col(p)),
            g.constant(Tensor::col(a)),
            dt,
        )?;
        Ok((qn.value().data().to_vec(), pn.value().data().to_vec()))
    }

    /// `dt` is the integration step; `hist.dt` only scales the velocity
    /// features.
    pub fn predict_next_energy(&self, hist: &KinematicHistory, a: &[f64], dt: f64) -> Result<EnergyPrediction> {
        self.check_action(a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let input = g.constant(self.history_input(&[hist])?);
        let q_t = g.leaf(self.last_coordinates(&[hist]));
        let av = g.constant(Tensor::col(a));
        let nodes = self.next_energy_graph(&b, input, q_t, av, dt)?;
        let p_t = nodes.p_t.value().data().to_vec();
        let (p_work, p_diss) = self.power_terms(hist.last(), &p_t, a)?;
        Ok(EnergyPrediction {
            h_t: nodes.h_t.item(),
            h_next: nodes.h_next.item(),
            p_t,
            p_next: nodes.p_next.value().data().to_vec(),
            p_work,
            p_diss,
        })
    }

    /// `∇_a H_next`.
    pub fn energy_action_gradient(&self, hist: &KinematicHistory, a: &[f64], dt: f64) -> Result<Vec<f64>> {
        self.check_action(a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let input = g.constant(self.history_input(&[hist])?);
        let q_t = g.constant(self.last_coordinates(&[hist]));
        let av = g.leaf(Tensor::col(a));
        let nodes = self.next_energy_graph(&b, input, q_t, av, dt)?;
        Ok(g.backward(nodes.h_next, &[av]).remove(0).into_data())
    }

    /// `∇²_a H_next · v`.
    pub fn action_hvp(&self, hist: &KinematicHistory, a: &[f64], v: &[f64], dt: f64) -> Result<Vec<f64>> {
        self.check_action(a)?;
        self.check_action(v)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let input = g.constant(self.history_input(&[hist])?);
        let q_t = g.constant(self.last_coordinates(&[hist]));
        let av = g.leaf(Tensor::col(a));
        let nodes = self.next_energy_graph(&b, input, q_t, av, dt)?;
        let ga = g.grad(nodes.h_next, &[av])[0];
        let dir = g.constant(Tensor::col(v));
        Ok(g.backward(ga.dot(dir), &[av]).remove(0).into_data())
    }
}

fn unit_columns(n: usize, j: usize, batch: usize) -> Tensor {
    let mut t = Tensor::zeros(n, batch);
    for b in 0..batch {
        t.set(j, b, 1.0);
    }
    t
}

/// One supervised example: a window ending at `t`, the action applied over
/// `[t, t + dt)`, energies in joules at both ends and the true momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub hist: KinematicHistory,
    pub a: Vec<f64>,
    pub e_t: f64,
    pub e_next: f64,
    pub p_true: Option<Vec<f64>>,
}

/// Windows of `window + 1` records; the first usable index is `window`.
pub fn energy_samples(spec: &EnvSpec, trajs: &[Trajectory], window: usize) -> Vec<EnergySample> {
    let mut out = Vec::new();
    for tr in trajs {
        let s = &tr.steps;
        for t in window..s.len().saturating_sub(1) {
            out.push(EnergySample {
                hist: KinematicHistory { q_window: s[t - window..=t].iter().map(|r| r.q.clone()).collect(), dt: tr.dt },
                a: s[t + 1].a.clone(),
                e_t: s[t].e_true,
                e_next: s[t + 1].e_true,
                p_true: Some(spec.momentum(&s[t].q, &s[t].qdot)),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub w_energy: f64,
    pub w_next: f64,
    pub w_momentum: f64,
    /// Refit the calibration and velocity scales from the data first.
    pub fit_normalization: bool,
}

impl Default for EnergyTrainConfig {
    fn default() -> Self {
        EnergyTrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            clip_norm: 10.0,
            w_energy: 1.0,
            w_next: 1.0,
            w_momentum: 1.0,
            fit_normalization: true,
        }
    }
}

/// Mean per-sample loss terms over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyEpoch {
    pub total: f64,
    pub energy: f64,
    pub next: f64,
    pub momentum: f64,
}

impl EnergyModel {
    /// Fits the calibration to the energy spread and the velocity scales to
    /// the finite-difference velocity spread of `samples`.
    pub fn fit_normalization(&mut self, samples: &[EnergySample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no energy samples".into()));
        }
        let e: Vec<f64> = samples.iter().map(|s| s.e_t).collect();
        let mean = crate::stats::mean(&e);
        let std = crate::stats::std_dev(&e);
        self.calibration = Calibration { scale: if std > 1e-9 { std } else { 1.0 }, offset: mean };
        let mut scale = vec![0.0; self.d_q];
        for s in samples {
            let w = &s.hist.q_window;
            for i in 0..self.d_q {
                let mut d = w[w.len() - 1][i] - w[w.len() - 2][i];
                if self.angle_mask[i] {
                    d = wrap_angle(d);
                }
                scale[i] += (d / s.hist.dt).powi(2);
            }
        }
        let scale = scale.iter().map(|v| (v / samples.len() as f64).sqrt().max(1e-6)).collect();
        self.set_velocity_scale(scale)
    }

    /// Per-sample loss terms `(energy, next, momentum)` as `(1 x B)` rows.
    pub fn loss_terms<'g>(
        &self,
        g: &'g Graph,
        bound: &Bound<'g>,
        batch: &[&EnergySample],
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let hists: Vec<&KinematicHistory> = batch.iter().map(|s| &s.hist).collect();
        let dt = hists[0].dt;
        dim_check(hists.iter().all(|h| h.dt == dt), || "mixed dt within a batch".into())?;
        let input = g.constant(self.history_input(&hists)?);
        let q_t = g.constant(self.last_coordinates(&hists));
        let cols: Vec<&[f64]> = batch.iter().map(|s| s.a.as_slice()).collect();
        let a = g.constant(Tensor::from_columns(self.d_a, &cols));
        let nodes = self.next_energy_graph(bound, input, q_t, a, dt)?;
        let cal = self.calibration;
        let row = |f: &dyn Fn(&EnergySample) -> f64| {
            g.constant(Tensor::new(1, batch.len(), batch.iter().map(|s| f(s)).collect()))
        };
        let e_t = row(&|s| cal.to_model(s.e_t));
        let e_next = row(&|s| cal.to_model(s.e_next));
        let energy = (nodes.h_t - e_t).square();
        let next = (nodes.h_next - e_next).square();
        let momentum = if batch.iter().all(|s| s.p_true.is_some()) {
            let cols: Vec<Vec<f64>> = batch
                .iter()
                .map(|s| s.p_true.as_ref().unwrap().iter().map(|p| p / cal.scale).collect())
                .collect();
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            (nodes.p_t - g.constant(Tensor::from_columns(self.d_q, &refs))).square().sum_rows()
        } else {
            g.constant(Tensor::zeros(1, batch.len()))
        };
        Ok((energy, next, momentum))
    }
}

/// Minibatch Adam on `w_e (Ĥ_t − E_t)² + w_n (Ĥ_next − E_next)² + w_p ‖p̂ − p‖²`
/// in normalized units. Returns per-epoch mean terms.
pub fn train_energy_model(
    model: &mut EnergyModel,
    samples: &[EnergySample],
    cfg: &EnergyTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EnergyEpoch>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no energy samples".into()));
    }
    if cfg.fit_normalization {
        model.fit_normalization(samples)?;
    }
    let mut adam = Adam::new(model.params.len(), cfg.lr).with_clip(cfg.clip_norm);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut acc = EnergyEpoch::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&EnergySample> = chunk.iter().map(|&i| &samples[i]).collect();
            let g = Graph::new();
            let bound = model.params.bind(&g);
            let (e, n, m) = model.loss_terms(&g, &bound, &batch)?;
            let per = e.scale(cfg.w_energy) + n.scale(cfg.w_next) + m.scale(cfg.w_momentum);
            let loss = per.mean();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("energy loss diverged in epoch {epoch}")));
            }
            let grads = crate::diffnet::param_grads(&g, loss, &[&bound]).remove(0);
            adam.step(&mut model.params, &grads);
            acc.total += per.sum().item();
            acc.energy += e.sum().item();
            acc.next += n.sum().item();
            acc.momentum += m.sum().item();
        }
        let n = samples.len() as f64;
        report.push(EnergyEpoch {
            total: acc.total / n,
            energy: acc.energy / n,
            next: acc.next / n,
            momentum: acc.momentum / n,
        });
    }
    Ok(report)
}

/// Raw value whose softplus equals `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

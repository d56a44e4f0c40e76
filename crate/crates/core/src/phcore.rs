//! Port-Hamiltonian dynamics in the projected latent phase space.
//!
//! The shadow transition is `ẋ = [J(x) − R(x)] ∇H(x) + G a`, with `J` skew by
//! construction (`A − Aᵀ`) and `R` positive semidefinite by construction
//! (`B Bᵀ + diag(softplus(d))`, `B` lower triangular). One RK4 step of this
//! field predicts the next phase point; the squared distance to the
//! stop-gradient posterior projection is the regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    glorot, softplus, transpose_perm, Activation, Bound, FieldArch, Graph, Mlp, ParamVector, SlotId, Tensor,
    Var,
};
use crate::error::{dim_check, Error, Result};

/// Point of the latent phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseVector(pub Vec<f64>);

impl PhaseVector {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(PhaseVector(x))
        } else {
            Err(Error::Numerical("phase vector has non-finite entries".into()))
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `A − Aᵀ`.
pub fn make_skew(a: &Tensor) -> Result<Tensor> {
    dim_check(a.rows() == a.cols(), || format!("skew source must be square, got {:?}", a.shape()))?;
    let at = a.transpose();
    Ok(a.zip_map(&at, |x, y| x - y))
}

/// Row-major positions of the lower triangle (diagonal included) of an
/// `n x n` matrix.
pub fn tril_indices(n: usize) -> Vec<usize> {
    (0..n).flat_map(|i| (0..=i).map(move |j| i * n + j)).collect()
}

pub fn tril_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// `R = B Bᵀ + diag(softplus(d))` with `B` filled row-major from `tril`.
pub fn make_dissipation(n: usize, tril: &[f64], diag: &[f64]) -> Result<Tensor> {
    dim_check(tril.len() == tril_len(n), || format!("expected {} factor entries, got {}", tril_len(n), tril.len()))?;
    dim_check(diag.len() == n, || format!("expected {n} diagonal entries, got {}", diag.len()))?;
    let mut b = Tensor::zeros(n, n);
    for (&pos, &v) in tril_indices(n).iter().zip(tril) {
        b.data_mut()[pos] = v;
    }
    let mut r = b.matmul(&b.transpose());
    for i in 0..n {
        let v = r.get(i, i) + softplus(diag[i]);
        r.set(i, i, v);
    }
    Ok(r)
}

/// Graph version of [`make_dissipation`] for an `(n(n+1)/2 x 1)` factor and an
/// `(n x 1)` raw diagonal.
pub fn dissipation_var<'g>(n: usize, tril: Var<'g>, diag: Var<'g>) -> Var<'g> {
    let b = tril.scatter_rows(tril_indices(n), n * n).reshape(n, n);
    let diag_idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let d = diag.softplus().scatter_rows(diag_idx, n * n).reshape(n, n);
    b.matmul(b.t()) + d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureMode {
    /// State-independent `J`, `R`, `G`.
    Constant,
    /// `A_raw(x)` and the dissipation factors come from a small network.
    StateDependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhConfig {
    /// Phase-space dimension `n`.
    pub dim: usize,
    pub hamiltonian_hidden: Vec<usize>,
    pub mode: StructureMode,
    pub structure_hidden: usize,
    /// When false, `R ≡ 0` and the shadow dynamics are conservative.
    pub dissipative: bool,
    /// Initial value of the raw dissipation diagonal.
    pub init_diag: f64,
}

impl Default for PhConfig {
    fn default() -> Self {
        PhConfig {
            dim: 8,
            hamiltonian_hidden: vec![64, 64],
            mode: StructureMode::Constant,
            structure_hidden: 32,
            dissipative: true,
            init_diag: -2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum StructureParams {
    Constant { a_raw: SlotId, r_tril: SlotId, r_diag: SlotId },
    StateDependent { net: Mlp },
}

/// Parameters of `J`, `R`, `G` and `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhStructure {
    pub params: ParamVector,
    dim: usize,
    action_dim: usize,
    dissipative: bool,
    hamiltonian: FieldArch,
    structure: StructureParams,
    port: SlotId,
}

impl PhStructure {
    pub fn new(cfg: &PhConfig, action_dim: usize, rng: &mut impl Rng) -> Self {
        let n = cfg.dim;
        let mut params = ParamVector::new();
        let hamiltonian =
            FieldArch::new_mlp(&mut params, "ph.hamiltonian", n, &cfg.hamiltonian_hidden, Activation::Tanh, rng);
        let structure = match cfg.mode {
            StructureMode::Constant => {
                let a: Vec<f64> = glorot(n, n, rng).into_iter().map(|v| 0.5 * v).collect();
                let a_raw = params.add("ph.a_raw", n, n, a);
                let t: Vec<f64> = glorot(tril_len(n), 1, rng).into_iter().map(|v| 0.1 * v).collect();
                let r_tril = params.add("ph.r_tril", tril_len(n), 1, t);
                let r_diag = params.add("ph.r_diag", n, 1, vec![cfg.init_diag; n]);
                StructureParams::Constant { a_raw, r_tril, r_diag }
            }
            StructureMode::StateDependent => {
                let out = n * n + tril_len(n) + n;
                let net = Mlp::new(&mut params, "ph.structure", &[n, cfg.structure_hidden, out], Activation::Tanh, rng);
                net.scale_output(&mut params, 0.1);
                let (_, bias) = net.output_layer();
                let b = params.slice_mut(bias);
                for v in &mut b[n * n + tril_len(n)..] {
                    *v = cfg.init_diag;
                }
                StructureParams::StateDependent { net }
            }
        };
        let port = params.add("ph.g", n, action_dim, glorot(n, action_dim, rng));
        PhStructure { params, dim: n, action_dim, dissipative: cfg.dissipative, hamiltonian, structure, port }
    }

    /// Constant structure with explicitly given matrices and Hamiltonian
    /// field. `r` is given through its raw factors.
    pub fn from_parts(
        a_raw: Tensor,
        r_tril: &[f64],
        r_diag: &[f64],
        port: Tensor,
        dissipative: bool,
        hamiltonian: impl FnOnce(&mut ParamVector) -> FieldArch,
    ) -> Result<Self> {
        let n = a_raw.rows();
        dim_check(a_raw.cols() == n, || "A_raw must be square".into())?;
        dim_check(port.rows() == n, || "port matrix rows must equal phase dimension".into())?;
        dim_check(r_tril.len() == tril_len(n) && r_diag.len() == n, || "dissipation factor sizes".into())?;
        let mut params = ParamVector::new();
        let hamiltonian = hamiltonian(&mut params);
        dim_check(hamiltonian.input_dim() == n, || "Hamiltonian input must equal phase dimension".into())?;
        let action_dim = port.cols();
        let a_raw = params.add("ph.a_raw", n, n, a_raw.into_data());
        let r_tril = params.add("ph.r_tril", tril_len(n), 1, r_tril.to_vec());
        let r_diag = params.add("ph.r_diag", n, 1, r_diag.to_vec());
        let port = params.add("ph.g", n, action_dim, port.into_data());
        Ok(PhStructure {
            params,
            dim: n,
            action_dim,
            dissipative,
            hamiltonian,
            structure: StructureParams::Constant { a_raw, r_tril, r_diag },
            port,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn is_dissipative(&self) -> bool {
        self.dissipative
    }

    pub fn port_slot(&self) -> SlotId {
        self.port
    }

    /// `H(x)` for an `(n x B)` batch, as `(1 x B)`.
    pub fn hamiltonian<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.hamiltonian.apply(bound, x)
    }

    /// `∇_x H` for a batch, differentiable.
    pub fn hamiltonian_grad<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.hamiltonian(bound, x);
        x.graph().grad(h, &[x])[0]
    }

    /// `[J(x) − R(x)] v` for a batch of directions `v`.
    fn structure_apply<'g>(&self, bound: &Bound<'g>, x: Var<'g>, v: Var<'g>) -> Var<'g> {
        let n = self.dim;
        match &self.structure {
            StructureParams::Constant { a_raw, r_tril, r_diag } => {
                let a = bound[*a_raw];
                let j = a - a.t();
                if self.dissipative {
                    let r = dissipation_var(n, bound[*r_tril], bound[*r_diag]);
                    (j - r).matmul(v)
                } else {
                    j.matmul(v)
                }
            }
            StructureParams::StateDependent { net } => {
                let out = net.forward(bound, x);
                let a = out.slice_rows(0, n * n);
                let j = a - a.gather_rows(transpose_perm(n, n));
                let jv = j.batch_matvec(v);
                if !self.dissipative {
                    return jv;
                }
                let tl = tril_len(n);
                let b = out.slice_rows(n * n, tl).scatter_rows(tril_indices(n), n * n);
                let btv = b.gather_rows(transpose_perm(n, n)).batch_matvec(v);
                let rv = b.batch_matvec(btv) + out.slice_rows(n * n + tl, n).softplus() * v;
                jv - rv
            }
        }
    }

    /// `ẋ = [J − R] ∇H + G a` for `(n x B)` states and `(d_a x B)` actions.
    pub fn vector_field<'g>(&self, bound: &Bound<'g>, x: Var<'g>, a: Var<'g>) -> Var<'g> {
        assert_eq!(x.rows(), self.dim, "phase dimension");
        assert_eq!(a.rows(), self.action_dim, "action dimension");
        let grad_h = self.hamiltonian_grad(bound, x);
        self.structure_apply(bound, x, grad_h) + bound[self.port].matmul(a)
    }

    /// One RK4 step of the shadow dynamics with the action held constant.
    pub fn predict_next<'g>(&self, bound: &Bound<'g>, x: Var<'g>, a: Var<'g>, dt: f64) -> Result<Var<'g>> {
        let out = rk4_step(&[x], dt, |s| vec![self.vector_field(bound, s[0], a)])?;
        Ok(out[0])
    }

    /// Point evaluation of the vector field.
    pub fn vector_field_at(&self, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x, a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let xv = g.leaf(Tensor::col(x));
        let av = g.constant(Tensor::col(a));
        Ok(self.vector_field(&b, xv, av).value().data().to_vec())
    }

    pub fn hamiltonian_at(&self, x: &[f64]) -> Result<f64> {
        dim_check(x.len() == self.dim, || format!("phase dimension {} vs {}", x.len(), self.dim))?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        Ok(self.hamiltonian(&b, g.constant(Tensor::col(x))).item())
    }

    pub fn hamiltonian_grad_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        dim_check(x.len() == self.dim, || format!("phase dimension {} vs {}", x.len(), self.dim))?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let xv = g.leaf(Tensor::col(x));
        Ok(self.hamiltonian_grad(&b, xv).value().data().to_vec())
    }

    pub fn step_at(&self, x: &[f64], a: &[f64], dt: f64) -> Result<Vec<f64>> {
        self.check_point(x, a)?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let xv = g.leaf(Tensor::col(x));
        let av = g.constant(Tensor::col(a));
        Ok(self.predict_next(&b, xv, av, dt)?.value().data().to_vec())
    }

    /// `(J, R, G)` evaluated at `x`.
    pub fn matrices_at(&self, x: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
        dim_check(x.len() == self.dim, || format!("phase dimension {} vs {}", x.len(), self.dim))?;
        let n = self.dim;
        let g_mat = self.params.tensor(self.port);
        let (j, r) = match &self.structure {
            StructureParams::Constant { a_raw, r_tril, r_diag } => {
                let j = make_skew(&self.params.tensor(*a_raw))?;
                let r = make_dissipation(n, self.params.slice(*r_tril), self.params.slice(*r_diag))?;
                (j, r)
            }
            StructureParams::StateDependent { net } => {
                let g = Graph::new();
                let b = self.params.bind_frozen(&g);
                let out = net.forward(&b, g.constant(Tensor::col(x))).value();
                let a = Tensor::new(n, n, out.data()[..n * n].to_vec());
                let tl = tril_len(n);
                let r = make_dissipation(n, &out.data()[n * n..n * n + tl], &out.data()[n * n + tl..])?;
                (make_skew(&a)?, r)
            }
        };
        let r = if self.dissipative { r } else { Tensor::zeros(n, n) };
        Ok((j, r, g_mat))
    }

    fn check_point(&self, x: &[f64], a: &[f64]) -> Result<()> {
        dim_check(x.len() == self.dim, || format!("phase dimension {} vs {}", x.len(), self.dim))?;
        dim_check(a.len() == self.action_dim, || format!("action dimension {} vs {}", a.len(), self.action_dim))
    }
}

/// Classical fourth-order Runge–Kutta step of `ṡ = f(s)` over a tuple of
/// state blocks. Any input held fixed over the step (e.g. the action) is
/// captured by `f`.
pub fn rk4_step<'g, F>(state: &[Var<'g>], dt: f64, mut f: F) -> Result<Vec<Var<'g>>>
where
    F: FnMut(&[Var<'g>]) -> Vec<Var<'g>>,
{
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::Numerical(format!("invalid integration step {dt}")));
    }
    if dt == 0.0 {
        return Ok(state.to_vec());
    }
    let mut eval = |s: &[Var<'g>]| -> Result<Vec<Var<'g>>> {
        let k = f(s);
        if k.len() != s.len() {
            return Err(Error::Dimension("vector field returned a different number of blocks".into()));
        }
        if k.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::Numerical("non-finite vector field in RK4 stage".into()));
        }
        Ok(k)
    };
    let shift = |s: &[Var<'g>], k: &[Var<'g>], h: f64| -> Vec<Var<'g>> {
        s.iter().zip(k).map(|(&x, &d)| x + d.scale(h)).collect()
    };
    let k1 = eval(state)?;
    let k2 = eval(&shift(state, &k1, 0.5 * dt))?;
    let k3 = eval(&shift(state, &k2, 0.5 * dt))?;
    let k4 = eval(&shift(state, &k3, dt))?;
    let next: Vec<Var<'g>> = (0..state.len())
        .map(|i| {
            let incr = k1[i] + (k2[i] + k3[i]).scale(2.0) + k4[i];
            state[i] + incr.scale(dt / 6.0)
        })
        .collect();
    if next.iter().any(|v| !v.value().is_finite()) {
        return Err(Error::Numerical("non-finite RK4 update".into()));
    }
    Ok(next)
}

/// RK4 on plain vectors; used for reference solutions.
pub fn rk4_step_values(x: &[f64], dt: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let axpy = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = f(x);
    let k2 = f(&axpy(x, &k1, 0.5 * dt));
    let k3 = f(&axpy(x, &k2, 0.5 * dt));
    let k4 = f(&axpy(x, &k3, dt));
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Batch mean of `‖sg(x_post) − x_pred‖²` for `(n x B)` inputs. The target is
/// detached here, so only the prediction path carries gradient.
pub fn shadow_loss<'g>(x_post: Var<'g>, x_pred: Var<'g>) -> Result<Var<'g>> {
    dim_check(x_post.shape() == x_pred.shape(), || {
        format!("shadow loss shapes {:?} vs {:?}", x_post.shape(), x_pred.shape())
    })?;
    let batch = x_pred.cols() as f64;
    let diff = x_post.detach() - x_pred;
    Ok(diff.square().sum().scale(1.0 / batch))
}

/// Value of the shadow loss over paired phase vectors.
pub fn shadow_loss_values(post: &[PhaseVector], pred: &[PhaseVector]) -> Result<f64> {
    dim_check(post.len() == pred.len() && !post.is_empty(), || "shadow loss needs equal, non-empty batches".into())?;
    let mut total = 0.0;
    for (a, b) in post.iter().zip(pred) {
        dim_check(a.dim() == b.dim(), || format!("phase dimensions {} vs {}", a.dim(), b.dim()))?;
        total += a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / post.len() as f64)
}

/// Linear warmup-then-ramp schedule of the regularizer weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub lambda_max: f64,
    /// Weight is zero for `step < warmup_steps`.
    pub warmup_steps: u64,
    /// Step at which the ramp reaches `lambda_max`.
    pub total_steps: u64,
}

impl CurriculumSchedule {
    /// Default shape: 10% warmup, ramp over the next 40% of `steps`.
    pub fn for_run(lambda_max: f64, steps: u64) -> Self {
        CurriculumSchedule { lambda_max, warmup_steps: steps / 10, total_steps: steps / 2 }
    }
}

pub fn curriculum_weight(step: u64, sched: &CurriculumSchedule) -> f64 {
    if step < sched.warmup_steps {
        0.0
    } else if step >= sched.total_steps {
        sched.lambda_max
    } else {
        let span = (sched.total_steps - sched.warmup_steps) as f64;
        sched.lambda_max * (step - sched.warmup_steps) as f64 / span
    }
}

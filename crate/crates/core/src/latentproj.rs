//! Physical/environment split of the deterministic latent, the affine map
//! into phase space and the PCA log-volume metric.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{glorot, Bound, Graph, ParamVector, SlotId, Tensor, Var};
use crate::error::{dim_check, Error, Result};
use crate::phcore::PhaseVector;

/// Eigenvalue floor in [`log_phase_volume`].
pub const VOLUME_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPartition {
    pub dim: usize,
    pub split_index: usize,
}

impl LatentPartition {
    pub fn new(dim: usize, split_index: usize) -> Result<Self> {
        if split_index == 0 || split_index >= dim {
            return Err(Error::Dimension(format!("split index {split_index} outside (0, {dim})")));
        }
        Ok(LatentPartition { dim, split_index })
    }

    /// Even split, rounding the physical half up.
    pub fn half(dim: usize) -> Result<Self> {
        Self::new(dim, dim.div_ceil(2))
    }

    pub fn phys_dim(&self) -> usize {
        self.split_index
    }

    pub fn env_dim(&self) -> usize {
        self.dim - self.split_index
    }

    pub fn phys<'a>(&self, h: &'a [f64]) -> Result<&'a [f64]> {
        dim_check(h.len() == self.dim, || format!("latent has {} entries, expected {}", h.len(), self.dim))?;
        Ok(&h[..self.split_index])
    }

    pub fn env<'a>(&self, h: &'a [f64]) -> Result<&'a [f64]> {
        dim_check(h.len() == self.dim, || format!("latent has {} entries, expected {}", h.len(), self.dim))?;
        Ok(&h[self.split_index..])
    }

    /// Physical rows of a `(dim x B)` batch.
    pub fn phys_var<'g>(&self, h: Var<'g>) -> Var<'g> {
        h.slice_rows(0, self.split_index)
    }
}

/// `x = W h_phys + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub params: ParamVector,
    w: SlotId,
    b: SlotId,
}

impl Projection {
    pub fn new(phase_dim: usize, phys_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = glorot(phase_dim, phys_dim, rng);
        Self::from_parts(Tensor::new(phase_dim, phys_dim, w), &vec![0.0; phase_dim])
    }

    pub fn from_parts(w: Tensor, b: &[f64]) -> Result<Self> {
        let (n, d) = w.shape();
        dim_check(n <= d, || format!("phase dimension {n} exceeds physical latent dimension {d}"))?;
        dim_check(b.len() == n, || format!("bias has {} entries, expected {n}", b.len()))?;
        if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("projection parameters must be finite".into()));
        }
        let mut params = ParamVector::new();
        let w = params.add("proj.w", n, d, w.into_data());
        let b = params.add("proj.b", n, 1, b.to_vec());
        Ok(Projection { params, w, b })
    }

    pub fn phase_dim(&self) -> usize {
        self.params.slot(self.w).rows
    }

    pub fn phys_dim(&self) -> usize {
        self.params.slot(self.w).cols
    }

    pub fn weight(&self) -> Tensor {
        self.params.tensor(self.w)
    }

    pub fn bias(&self) -> &[f64] {
        self.params.slice(self.b)
    }

    /// Batched projection of `(d_phys x B)` inputs.
    pub fn apply<'g>(&self, bound: &Bound<'g>, h_phys: Var<'g>) -> Var<'g> {
        let batch = h_phys.cols();
        bound[self.w].matmul(h_phys) + bound[self.b].broadcast_cols(batch)
    }
}

pub fn project(p: &Projection, h_phys: &[f64]) -> Result<PhaseVector> {
    dim_check(h_phys.len() == p.phys_dim(), || {
        format!("physical latent has {} entries, expected {}", h_phys.len(), p.phys_dim())
    })?;
    let g = Graph::new();
    let b = p.params.bind_frozen(&g);
    let x = p.apply(&b, g.constant(Tensor::col(h_phys)));
    PhaseVector::new(x.value().data().to_vec())
}

/// Sample covariance (unbiased) of equal-length vectors.
pub fn sample_covariance(samples: &[PhaseVector]) -> Result<DMatrix<f64>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples[0].dim();
    dim_check(samples.iter().all(|s| s.dim() == n), || "samples have mixed dimensions".into())?;
    let count = samples.len();
    let data = DMatrix::from_fn(count, n, |i, j| samples[i].0[j]);
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(count, n, |i, j| data[(i, j)] - mean[j]);
    Ok(centered.transpose() * &centered / (count - 1) as f64)
}

/// Sum of the log of the `n_components` largest covariance eigenvalues, each
/// floored at [`VOLUME_FLOOR`].
pub fn log_phase_volume(samples: &[PhaseVector], n_components: usize) -> Result<f64> {
    let cov = sample_covariance(samples)?;
    let n = cov.nrows();
    dim_check(n_components >= 1 && n_components <= n, || {
        format!("n_components {n_components} outside 1..={n}")
    })?;
    let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let v: f64 = eig[..n_components].iter().map(|&l| l.max(VOLUME_FLOOR).ln()).sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("non-finite phase volume".into()))
    }
}

/// Relative reduction in percent.
pub fn volume_reduction(baseline: f64, ours: f64) -> Result<f64> {
    if !baseline.is_finite() || !ours.is_finite() {
        return Err(Error::Numerical("volume values must be finite".into()));
    }
    if baseline == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok((baseline - ours) / baseline.abs() * 100.0)
}

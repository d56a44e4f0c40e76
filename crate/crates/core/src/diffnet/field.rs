use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::nets::{Activation, Mlp};
use super::params::{param_grads, Bound, ParamVector, SlotId};
use super::tensor::Tensor;
use crate::error::{dim_check, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FieldArch {
    Mlp(Mlp),
    /// `f(x) = ½ xᵀ A x + wᵀ x + c`.
    Quadratic { dim: usize, a: SlotId, w: SlotId, c: SlotId },
}

/// Learned scalar function of a vector, e.g. a Hamiltonian or a potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub params: ParamVector,
    pub arch: FieldArch,
}

impl FieldArch {
    /// MLP field with its slots appended to `pv` under `name`.
    pub fn new_mlp(
        pv: &mut ParamVector,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        FieldArch::Mlp(Mlp::new(pv, name, &dims, activation, rng))
    }

    pub fn new_quadratic(pv: &mut ParamVector, name: &str, a: Tensor, w: &[f64], c: f64) -> Self {
        let dim = w.len();
        assert_eq!(a.shape(), (dim, dim), "quadratic form shape");
        let a = pv.add(format!("{name}.a"), dim, dim, a.into_data());
        let w = pv.add(format!("{name}.w"), dim, 1, w.to_vec());
        let c = pv.add(format!("{name}.c"), 1, 1, vec![c]);
        FieldArch::Quadratic { dim, a, w, c }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FieldArch::Mlp(m) => m.input_dim(),
            FieldArch::Quadratic { dim, .. } => *dim,
        }
    }

    /// Evaluates the field on an `(n x B)` batch, returning `(1 x B)`.
    pub fn apply<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        match self {
            FieldArch::Mlp(m) => m.forward(bound, x),
            FieldArch::Quadratic { a, w, c, .. } => {
                let batch = x.cols();
                let quad = (x * bound[*a].matmul(x)).sum_rows().scale(0.5);
                quad + bound[*w].t().matmul(x) + bound[*c].broadcast_cols(batch)
            }
        }
    }
}

impl ScalarField {
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut params = ParamVector::new();
        let arch = FieldArch::new_mlp(&mut params, "field", input_dim, hidden, activation, rng);
        ScalarField { params, arch }
    }

    pub fn quadratic(a: Tensor, w: &[f64], c: f64) -> Self {
        let mut params = ParamVector::new();
        let arch = FieldArch::new_quadratic(&mut params, "field", a, w, c);
        ScalarField { params, arch }
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn apply<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.arch.apply(bound, x)
    }

    fn check(&self, input: &[f64]) -> Result<()> {
        dim_check(input.len() == self.input_dim(), || {
            format!("field expects {} inputs, got {}", self.input_dim(), input.len())
        })
    }
}

pub fn eval_scalar(field: &ScalarField, input: &[f64]) -> Result<f64> {
    field.check(input)?;
    let g = Graph::new();
    let b = field.params.bind_frozen(&g);
    Ok(field.apply(&b, g.constant(Tensor::col(input))).item())
}

/// Exact gradient of the field with respect to its input.
pub fn grad_scalar(field: &ScalarField, input: &[f64]) -> Result<Vec<f64>> {
    field.check(input)?;
    let g = Graph::new();
    let b = field.params.bind_frozen(&g);
    let x = g.leaf(Tensor::col(input));
    let y = field.apply(&b, x);
    Ok(g.backward(y, &[x]).remove(0).into_data())
}

/// Hessian-vector product by reverse-over-reverse differentiation.
pub fn hvp_scalar(field: &ScalarField, input: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    field.check(input)?;
    dim_check(direction.len() == input.len(), || {
        format!("direction has {} entries, input has {}", direction.len(), input.len())
    })?;
    let g = Graph::new();
    let b = field.params.bind_frozen(&g);
    let x = g.leaf(Tensor::col(input));
    let y = field.apply(&b, x);
    let gx = g.grad(y, &[x])[0];
    let v = g.constant(Tensor::col(direction));
    Ok(g.backward(gx.dot(v), &[x]).remove(0).into_data())
}

/// Parameter gradient of `adjoint * field(input)`, in layout order.
pub fn grad_params(field: &ScalarField, input: &[f64], adjoint: f64) -> Result<Vec<f64>> {
    field.check(input)?;
    let g = Graph::new();
    let b = field.params.bind(&g);
    let y = field.apply(&b, g.constant(Tensor::col(input)));
    Ok(param_grads(&g, y.scale(adjoint), &[&b]).remove(0))
}

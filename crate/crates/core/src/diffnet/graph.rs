//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every operation is evaluated eagerly and recorded on a [`Graph`]. Two
//! backward passes are provided:
//!
//! * [`Graph::backward`] computes numeric adjoints only. It is the fast path
//!   used for parameter gradients of training losses.
//! * [`Graph::grad`] records the backward pass itself as new graph nodes, so
//!   the returned gradients are ordinary [`Var`]s that can be differentiated
//!   again. Hessian-vector products, `q̇ = ∇_p H` inside an integrator, and the
//!   curvature constraints of the actor are all built on this.
//!
//! Stop-gradient is [`Var::detach`]: the value is copied into a constant node,
//! so no adjoint ever flows through it.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastScalar(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    ConcatRows(Rc<[usize]>),
    /// `(n*k x B) , (k x B) -> (n x B)`: per-column matrix-vector product with
    /// the matrix stored row-major down the column.
    BatchMatVec(usize, usize),
    /// `(n x B) , (k x B) -> (n*k x B)`: per-column outer product.
    BatchOuter(usize, usize),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        use Op::*;
        match self {
            Leaf | Const => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | BatchMatVec(a, b)
            | BatchOuter(a, b) => {
                f(*a);
                f(*b);
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Transpose(a) | Reshape(a) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | Exp(a) | Ln(a) | Sin(a) | Cos(a) | Clamp(a, _, _) | SumAll(a)
            | SumRows(a) | SumCols(a) | BroadcastScalar(a) | BroadcastRows(a)
            | BroadcastCols(a) | GatherRows(a, _) | ScatterRows(a, _) => f(*a),
            ConcatRows(parts) => parts.iter().for_each(|&p| f(p)),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of a computation. Nodes are append-only; ids are topologically
/// ordered by construction.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row permutation mapping a column-stacked `n x k` matrix to its transpose.
pub(crate) fn transpose_perm(n: usize, k: usize) -> Rc<[usize]> {
    let mut perm = vec![0; n * k];
    for i in 0..n {
        for j in 0..k {
            perm[j * n + i] = i * k + j;
        }
    }
    perm.into()
}

fn gather_rows(a: &Tensor, idx: &[usize]) -> Tensor {
    let c = a.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &r in idx {
        data.extend_from_slice(a.row(r));
    }
    Tensor::new(idx.len(), c, data)
}

fn scatter_rows(a: &Tensor, idx: &[usize], out_rows: usize) -> Tensor {
    let c = a.cols();
    let mut out = Tensor::zeros(out_rows, c);
    let d = out.data_mut();
    for (r, &target) in idx.iter().enumerate() {
        for (o, &v) in d[target * c..(target + 1) * c].iter_mut().zip(a.row(r)) {
            *o += v;
        }
    }
    out
}

fn batch_matvec(m: &Tensor, v: &Tensor) -> Tensor {
    let (k, b) = v.shape();
    assert_eq!(m.cols(), b, "batch_matvec batch mismatch");
    assert_eq!(m.rows() % k, 0, "batch_matvec matrix rows not a multiple of vector length");
    let n = m.rows() / k;
    let mut out = Tensor::zeros(n, b);
    let md = m.data();
    let vd = v.data();
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..k {
            let mrow = &md[(i * k + j) * b..(i * k + j + 1) * b];
            let vrow = &vd[j * b..(j + 1) * b];
            for ((o, &x), &y) in od[i * b..(i + 1) * b].iter_mut().zip(mrow).zip(vrow) {
                *o += x * y;
            }
        }
    }
    out
}

fn batch_outer(u: &Tensor, v: &Tensor) -> Tensor {
    let (n, b) = u.shape();
    let (k, b2) = v.shape();
    assert_eq!(b, b2, "batch_outer batch mismatch");
    let mut out = Tensor::zeros(n * k, b);
    let ud = u.data();
    let vd = v.data();
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..k {
            let r = i * k + j;
            for ((o, &x), &y) in od[r * b..(r + 1) * b]
                .iter_mut()
                .zip(&ud[i * b..(i + 1) * b])
                .zip(&vd[j * b..(j + 1) * b])
            {
                *o = x * y;
            }
        }
    }
    out
}

fn sum_rows(a: &Tensor) -> Tensor {
    let (r, c) = a.shape();
    let mut out = Tensor::zeros(1, c);
    for i in 0..r {
        for (o, &v) in out.data_mut().iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

fn sum_cols(a: &Tensor) -> Tensor {
    let r = a.rows();
    Tensor::new(r, 1, (0..r).map(|i| a.row(i).iter().sum()).collect())
}

fn broadcast_rows(a: &Tensor, rows: usize) -> Tensor {
    assert_eq!(a.rows(), 1, "broadcast_rows expects a single row");
    let mut data = Vec::with_capacity(rows * a.cols());
    for _ in 0..rows {
        data.extend_from_slice(a.data());
    }
    Tensor::new(rows, a.cols(), data)
}

fn broadcast_cols(a: &Tensor, cols: usize) -> Tensor {
    assert_eq!(a.cols(), 1, "broadcast_cols expects a single column");
    let mut data = Vec::with_capacity(a.rows() * cols);
    for &v in a.data() {
        data.extend(std::iter::repeat_n(v, cols));
    }
    Tensor::new(a.rows(), cols, data)
}

fn clamp_mask(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    a.map(|x| if x > lo && x < hi { 1.0 } else { 0.0 })
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Differentiable input (a parameter or a point of evaluation).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Constant: never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let ids: Rc<[usize]> = parts.iter().map(|p| p.id).collect::<Vec<_>>().into();
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(ids))
    }

    fn need_mask(&self, lo: usize, hi: usize, wrt: &[usize]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut need = vec![false; hi + 1 - lo];
        for &w in wrt {
            need[w - lo] = true;
        }
        for i in lo..=hi {
            if need[i - lo] {
                continue;
            }
            let mut any = false;
            nodes[i].op.for_each_parent(|p| {
                if p >= lo && need[p - lo] {
                    any = true;
                }
            });
            need[i - lo] = any;
        }
        need
    }

    /// Numeric reverse sweep. `y` may have any shape; the seed is all ones
    /// (i.e. the gradient of `sum(y)`).
    pub fn backward<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Tensor> {
        let seed = Tensor::filled(y.rows(), y.cols(), 1.0);
        self.backward_seeded(y, seed, wrt)
    }

    pub fn backward_seeded<'g>(&'g self, y: Var<'g>, seed: Tensor, wrt: &[Var<'g>]) -> Vec<Tensor> {
        assert_eq!(seed.shape(), y.shape(), "seed shape must match output");
        let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let zeros = || wrt.iter().map(|w| Tensor::zeros(w.rows(), w.cols())).collect();
        let lo = match ids.iter().copied().min() {
            Some(lo) if lo <= y.id => lo,
            _ => return zeros(),
        };
        let hi = y.id;
        let need = self.need_mask(lo, hi, &ids);
        if !need[hi - lo] {
            return zeros();
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; hi + 1 - lo];
        let mut out: Vec<Option<Tensor>> = vec![None; ids.len()];
        adj[hi - lo] = Some(seed);

        let nodes = self.nodes.borrow();
        for i in (lo..=hi).rev() {
            if !need[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo].take() else { continue };
            for (k, &w) in ids.iter().enumerate() {
                if w == i {
                    out[k] = Some(g.clone());
                }
            }
            let node = &nodes[i];
            let mut acc = |p: usize, t: Tensor| {
                if p >= lo && need[p - lo] {
                    match &mut adj[p - lo] {
                        Some(prev) => prev.add_assign(&t),
                        slot @ None => *slot = Some(t),
                    }
                }
            };
            let v = |id: usize| -> &Tensor { &nodes[id].value };
            use Op::*;
            match &node.op {
                Leaf | Const => {}
                Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Mul(a, b) => {
                    acc(*a, g.zip_map(v(*b), |x, y| x * y));
                    acc(*b, g.zip_map(v(*a), |x, y| x * y));
                }
                Div(a, b) => {
                    let ga = g.zip_map(v(*b), |x, y| x / y);
                    let gb = ga.zip_map(&node.value, |x, y| -x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Neg(a) => acc(*a, g.map(|x| -x)),
                Scale(a, c) => acc(*a, g.map(|x| x * c)),
                AddScalar(a) => acc(*a, g),
                MatMul(a, b) => {
                    acc(*a, g.matmul(&v(*b).transpose()));
                    acc(*b, v(*a).transpose().matmul(&g));
                }
                Transpose(a) => acc(*a, g.transpose()),
                Reshape(a) => {
                    let (r, c) = v(*a).shape();
                    acc(*a, g.reshape(r, c));
                }
                Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Softplus(a) => acc(*a, g.zip_map(v(*a), |x, y| x * sigmoid(y))),
                Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Ln(a) => acc(*a, g.zip_map(v(*a), |x, y| x / y)),
                Sin(a) => acc(*a, g.zip_map(v(*a), |x, y| x * y.cos())),
                Cos(a) => acc(*a, g.zip_map(v(*a), |x, y| -x * y.sin())),
                Clamp(a, lo_, hi_) => {
                    acc(*a, g.zip_map(&clamp_mask(v(*a), *lo_, *hi_), |x, m| x * m))
                }
                SumAll(a) => {
                    let (r, c) = v(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()));
                }
                SumRows(a) => acc(*a, broadcast_rows(&g, v(*a).rows())),
                SumCols(a) => acc(*a, broadcast_cols(&g, v(*a).cols())),
                BroadcastScalar(a) => acc(*a, Tensor::scalar(g.sum())),
                BroadcastRows(a) => acc(*a, sum_rows(&g)),
                BroadcastCols(a) => acc(*a, sum_cols(&g)),
                GatherRows(a, idx) => acc(*a, scatter_rows(&g, idx, v(*a).rows())),
                ScatterRows(a, idx) => acc(*a, gather_rows(&g, idx)),
                ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts.iter() {
                        let r = v(p).rows();
                        let idx: Vec<usize> = (start..start + r).collect();
                        acc(p, gather_rows(&g, &idx));
                        start += r;
                    }
                }
                BatchMatVec(m, x) => {
                    let (k, _) = v(*x).shape();
                    let n = v(*m).rows() / k;
                    acc(*m, batch_outer(&g, v(*x)));
                    let mt = gather_rows(v(*m), &transpose_perm(n, k));
                    acc(*x, batch_matvec(&mt, &g));
                }
                BatchOuter(u, x) => {
                    let n = v(*u).rows();
                    let k = v(*x).rows();
                    acc(*u, batch_matvec(&g, v(*x)));
                    let gt = gather_rows(&g, &transpose_perm(n, k));
                    acc(*x, batch_matvec(&gt, v(*u)));
                }
            }
        }
        drop(nodes);
        out.into_iter()
            .zip(wrt)
            .map(|(o, w)| o.unwrap_or_else(|| Tensor::zeros(w.rows(), w.cols())))
            .collect()
    }

    /// Differentiable reverse sweep: gradients of `sum(y)` with respect to
    /// `wrt`, recorded as new nodes of this graph.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let seed = self.constant(Tensor::filled(y.rows(), y.cols(), 1.0));
        self.grad_seeded(y, seed, wrt)
    }

    /// Vector-Jacobian product `seedᵀ ∂y/∂wrt`, differentiable in both `seed`
    /// and the graph.
    pub fn grad_seeded<'g>(&'g self, y: Var<'g>, seed: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        assert_eq!(seed.shape(), y.shape(), "seed shape must match output");
        let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let zeros = |g: &'g Graph| wrt.iter().map(|w| g.zeros(w.rows(), w.cols())).collect();
        let lo = match ids.iter().copied().min() {
            Some(lo) if lo <= y.id => lo,
            _ => return zeros(self),
        };
        let hi = y.id;
        let need = self.need_mask(lo, hi, &ids);
        if !need[hi - lo] {
            return zeros(self);
        }
        let mut adj: Vec<Option<Var<'g>>> = vec![None; hi + 1 - lo];
        let mut out: Vec<Option<Var<'g>>> = vec![None; ids.len()];
        adj[hi - lo] = Some(seed);

        let var = |id: usize| Var { graph: self, id };
        for i in (lo..=hi).rev() {
            if !need[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo].take() else { continue };
            for (k, &w) in ids.iter().enumerate() {
                if w == i {
                    out[k] = Some(g);
                }
            }
            let op = self.nodes.borrow()[i].op.clone();
            let mut acc = |p: usize, t: Var<'g>| {
                if p >= lo && need[p - lo] {
                    let slot = &mut adj[p - lo];
                    *slot = Some(match *slot {
                        Some(prev) => prev + t,
                        None => t,
                    });
                }
            };
            let y = var(i);
            use Op::*;
            match op {
                Leaf | Const => {}
                Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Sub(a, b) => {
                    acc(a, g);
                    acc(b, -g);
                }
                Mul(a, b) => {
                    acc(a, g * var(b));
                    acc(b, g * var(a));
                }
                Div(a, b) => {
                    let ga = g / var(b);
                    acc(a, ga);
                    acc(b, -(ga * y));
                }
                Neg(a) => acc(a, -g),
                Scale(a, c) => acc(a, g.scale(c)),
                AddScalar(a) => acc(a, g),
                MatMul(a, b) => {
                    acc(a, g.matmul(var(b).t()));
                    acc(b, var(a).t().matmul(g));
                }
                Transpose(a) => acc(a, g.t()),
                Reshape(a) => {
                    let (r, c) = var(a).shape();
                    acc(a, g.reshape(r, c));
                }
                Tanh(a) => acc(a, g * (-(y * y)).add_scalar(1.0)),
                Sigmoid(a) => acc(a, g * y * (-y).add_scalar(1.0)),
                Softplus(a) => acc(a, g * var(a).sigmoid()),
                Exp(a) => acc(a, g * y),
                Ln(a) => acc(a, g / var(a)),
                Sin(a) => acc(a, g * var(a).cos()),
                Cos(a) => acc(a, -(g * var(a).sin())),
                Clamp(a, lo_, hi_) => {
                    let mask = self.constant(clamp_mask(&var(a).value(), lo_, hi_));
                    acc(a, g * mask);
                }
                SumAll(a) => {
                    let (r, c) = var(a).shape();
                    acc(a, g.broadcast_scalar(r, c));
                }
                SumRows(a) => acc(a, g.broadcast_rows(var(a).rows())),
                SumCols(a) => acc(a, g.broadcast_cols(var(a).cols())),
                BroadcastScalar(a) => acc(a, g.sum()),
                BroadcastRows(a) => acc(a, g.sum_rows()),
                BroadcastCols(a) => acc(a, g.sum_cols()),
                GatherRows(a, idx) => acc(a, g.scatter_rows(idx, var(a).rows())),
                ScatterRows(a, idx) => acc(a, g.gather_rows(idx)),
                ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts.iter() {
                        let r = var(p).rows();
                        acc(p, g.slice_rows(start, r));
                        start += r;
                    }
                }
                BatchMatVec(m, x) => {
                    let k = var(x).rows();
                    let n = var(m).rows() / k;
                    acc(m, g.batch_outer(var(x)));
                    let mt = var(m).gather_rows(transpose_perm(n, k));
                    acc(x, mt.batch_matvec(g));
                }
                BatchOuter(u, x) => {
                    let n = var(u).rows();
                    let k = var(x).rows();
                    acc(u, g.batch_matvec(var(x)));
                    let gt = g.gather_rows(transpose_perm(n, k));
                    acc(x, gt.batch_matvec(var(u)));
                }
            }
        }
        out.into_iter()
            .zip(wrt)
            .map(|(o, w)| o.unwrap_or_else(|| self.zeros(w.rows(), w.cols())))
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'g> {
        let v = f(&self.value());
        self.graph.push(v, op)
    }

    fn binary(self, other: Var<'g>, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let v = f(&self.value(), &other.value());
        self.graph.push(v, op)
    }

    /// Stop-gradient copy.
    pub fn detach(self) -> Var<'g> {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(|a| a.map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(|a| a.map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'g> {
        self.unary(|a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        self.unary(|a| a.clone().reshape(rows, cols), Op::Reshape(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(|a| a.map(softplus), Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(|a| a.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(|a| a.map(f64::ln), Op::Ln(self.id))
    }

    pub fn sin(self) -> Var<'g> {
        self.unary(|a| a.map(f64::sin), Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'g> {
        self.unary(|a| a.map(f64::cos), Op::Cos(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    /// Elementwise clamp. The gradient is passed through strictly inside
    /// `(lo, hi)` and zero elsewhere.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(|a| a.map(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(|a| Tensor::scalar(a.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `(r, c) -> (1, c)`.
    pub fn sum_rows(self) -> Var<'g> {
        self.unary(sum_rows, Op::SumRows(self.id))
    }

    /// `(r, c) -> (r, 1)`.
    pub fn sum_cols(self) -> Var<'g> {
        self.unary(sum_cols, Op::SumCols(self.id))
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'g> {
        self.unary(|a| Tensor::filled(rows, cols, a.item()), Op::BroadcastScalar(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'g> {
        self.unary(|a| broadcast_rows(a, rows), Op::BroadcastRows(self.id))
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'g> {
        self.unary(|a| broadcast_cols(a, cols), Op::BroadcastCols(self.id))
    }

    pub fn gather_rows(self, idx: impl Into<Rc<[usize]>>) -> Var<'g> {
        let idx = idx.into();
        let f = {
            let idx = idx.clone();
            move |a: &Tensor| gather_rows(a, &idx)
        };
        self.unary(f, Op::GatherRows(self.id, idx))
    }

    pub fn scatter_rows(self, idx: impl Into<Rc<[usize]>>, out_rows: usize) -> Var<'g> {
        let idx = idx.into();
        assert!(idx.iter().all(|&i| i < out_rows), "scatter index out of range");
        let f = {
            let idx = idx.clone();
            move |a: &Tensor| scatter_rows(a, &idx, out_rows)
        };
        self.unary(f, Op::ScatterRows(self.id, idx))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(idx)
    }

    pub fn row(self, r: usize) -> Var<'g> {
        self.gather_rows(vec![r])
    }

    pub fn batch_matvec(self, v: Var<'g>) -> Var<'g> {
        self.binary(v, batch_matvec, Op::BatchMatVec(self.id, v.id))
    }

    pub fn batch_outer(self, v: Var<'g>) -> Var<'g> {
        self.binary(v, batch_outer, Op::BatchOuter(self.id, v.id))
    }

    /// Sum of elementwise products.
    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        (self * other).sum()
    }
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'g> ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x / y), Op::Div(self.id, rhs.id))
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(|a| a.map(|x| -x), Op::Neg(self.id))
    }
}

impl<'g> ops::Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, c: f64) -> Var<'g> {
        self.scale(c)
    }
}

impl<'g> ops::Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, c: f64) -> Var<'g> {
        self.add_scalar(c)
    }
}

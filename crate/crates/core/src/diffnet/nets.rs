use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::params::{Bound, ParamVector, SlotId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Glorot-uniform weights.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Adds a dense layer `W (out x in)`, `b (out x 1)` to `pv`.
pub fn dense_layer(
    pv: &mut ParamVector,
    name: &str,
    input: usize,
    output: usize,
    rng: &mut impl Rng,
) -> (SlotId, SlotId) {
    let w = pv.add(format!("{name}.w"), output, input, glorot(output, input, rng));
    let b = pv.add_zeros(format!("{name}.b"), output, 1);
    (w, b)
}

pub fn apply_dense<'g>(bound: &Bound<'g>, layer: (SlotId, SlotId), x: Var<'g>) -> Var<'g> {
    let batch = x.cols();
    bound[layer.0].matmul(x) + bound[layer.1].broadcast_cols(batch)
}

/// Fully connected network; activation on hidden layers, linear output.
/// Inputs are `(in x B)` with one column per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<(SlotId, SlotId)>,
}

impl Mlp {
    pub fn new(
        pv: &mut ParamVector,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense_layer(pv, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { dims: dims.to_vec(), activation, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[(SlotId, SlotId)] {
        &self.layers
    }

    pub fn output_layer(&self) -> (SlotId, SlotId) {
        *self.layers.last().unwrap()
    }

    pub fn forward<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        assert_eq!(x.rows(), self.input_dim(), "MLP input width");
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &layer) in self.layers.iter().enumerate() {
            h = apply_dense(bound, layer, h);
            if i < last {
                h = self.activation.apply(h);
            }
        }
        h
    }

    /// Zeroes every weight and bias of the network.
    pub fn zero(&self, pv: &mut ParamVector) {
        for &(w, b) in &self.layers {
            pv.fill(w, 0.0);
            pv.fill(b, 0.0);
        }
    }

    /// Scales the output layer, a common trick to start heads near zero.
    pub fn scale_output(&self, pv: &mut ParamVector, factor: f64) {
        let (w, _) = self.output_layer();
        pv.slice_mut(w).iter_mut().for_each(|x| *x *= factor);
    }
}

/// Temporal convolution over a short window.
///
/// Input rows are time-major: `steps` blocks of `channels` rows, one column
/// per sample. Each layer is a kernel-2 causal convolution with its own
/// dilation (valid padding), followed by the activation. A linear head maps
/// the flattened last feature map to the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tcn {
    steps: usize,
    channels: usize,
    hidden: usize,
    dilations: Vec<usize>,
    convs: Vec<(SlotId, SlotId)>,
    head: (SlotId, SlotId),
    output: usize,
    activation: Activation,
}

impl Tcn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pv: &mut ParamVector,
        name: &str,
        steps: usize,
        channels: usize,
        hidden: usize,
        dilations: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut t = steps;
        let mut c = channels;
        let mut convs = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            assert!(t > d, "window of {t} steps too short for dilation {d}");
            convs.push(dense_layer(pv, &format!("{name}.conv{i}"), 2 * c, hidden, rng));
            t -= d;
            c = hidden;
        }
        let head = dense_layer(pv, &format!("{name}.head"), t * c, output, rng);
        Tcn {
            steps,
            channels,
            hidden,
            dilations: dilations.to_vec(),
            convs,
            head,
            output,
            activation,
        }
    }

    pub fn input_rows(&self) -> usize {
        self.steps * self.channels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn head(&self) -> (SlotId, SlotId) {
        self.head
    }

    pub fn convs(&self) -> &[(SlotId, SlotId)] {
        &self.convs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    pub fn forward<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        assert_eq!(x.rows(), self.input_rows(), "TCN input rows");
        let g = x.graph();
        let mut h = x;
        let mut t = self.steps;
        let mut c = self.channels;
        for (&d, &layer) in self.dilations.iter().zip(&self.convs) {
            let out_steps = t - d;
            let mut outs = Vec::with_capacity(out_steps);
            for s in 0..out_steps {
                let idx: Vec<usize> = (s * c..(s + 1) * c).chain((s + d) * c..(s + d + 1) * c).collect();
                let window = h.gather_rows(idx);
                outs.push(self.activation.apply(apply_dense(bound, layer, window)));
            }
            h = g.concat_rows(&outs);
            t = out_steps;
            c = self.hidden;
        }
        apply_dense(bound, self.head, h)
    }

    pub fn zero(&self, pv: &mut ParamVector) {
        for &(w, b) in self.convs.iter().chain(std::iter::once(&self.head)) {
            pv.fill(w, 0.0);
            pv.fill(b, 0.0);
        }
    }
}

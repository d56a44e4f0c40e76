use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named region of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotId(pub usize);

/// Flat parameter storage with a named layout. Slots are appended back to
/// back, so the layout always covers `values` exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Slot>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Vec<f64>) -> SlotId {
        assert_eq!(init.len(), rows * cols, "initial values do not match slot shape");
        let name = name.into();
        assert!(self.layout.iter().all(|s| s.name != name), "duplicate slot name {name}");
        let offset = self.values.len();
        self.values.extend(init);
        self.layout.push(Slot { name, offset, rows, cols });
        SlotId(self.layout.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SlotId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Slot] {
        &self.layout
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.layout[id.0]
    }

    pub fn find(&self, name: &str) -> Option<SlotId> {
        self.layout.iter().position(|s| s.name == name).map(SlotId)
    }

    pub fn slice(&self, id: SlotId) -> &[f64] {
        let s = &self.layout[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: SlotId) -> &mut [f64] {
        let s = &self.layout[id.0];
        let (o, n) = (s.offset, s.len());
        &mut self.values[o..o + n]
    }

    pub fn tensor(&self, id: SlotId) -> Tensor {
        let s = &self.layout[id.0];
        Tensor::new(s.rows, s.cols, self.slice(id).to_vec())
    }

    pub fn fill(&mut self, id: SlotId, v: f64) {
        self.slice_mut(id).iter_mut().for_each(|x| *x = v);
    }

    /// Replaces all values, keeping the layout.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Checks finiteness and that the layout tiles the value array.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.layout {
            if s.offset != next {
                return Err(Error::Dimension(format!("slot {} is not contiguous", s.name)));
            }
            next += s.len();
        }
        if next != self.values.len() {
            return Err(Error::Dimension("layout does not cover the parameter array".into()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameter at index {i}")));
        }
        Ok(())
    }

    /// Creates one leaf per slot.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        let vars = (0..self.layout.len()).map(|i| g.leaf(self.tensor(SlotId(i)))).collect();
        Bound { vars }
    }

    /// Binds every slot as a constant (no parameter gradients are possible).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        let vars = (0..self.layout.len()).map(|i| g.constant(self.tensor(SlotId(i)))).collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamVector`] as graph variables.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

impl<'g> Index<SlotId> for Bound<'g> {
    type Output = Var<'g>;
    fn index(&self, id: SlotId) -> &Var<'g> {
        &self.vars[id.0]
    }
}

/// Flat parameter gradients of the scalar `loss` for each bound set, in
/// layout order.
pub fn param_grads<'g>(g: &'g Graph, loss: Var<'g>, sets: &[&Bound<'g>]) -> Vec<Vec<f64>> {
    let all: Vec<Var<'g>> = sets.iter().flat_map(|b| b.vars.iter().copied()).collect();
    let grads = g.backward(loss, &all);
    let mut out = Vec::with_capacity(sets.len());
    let mut it = grads.into_iter();
    for b in sets {
        let mut flat = Vec::new();
        for _ in 0..b.vars.len() {
            flat.extend_from_slice(it.next().expect("gradient per var").data());
        }
        out.push(flat);
    }
    out
}

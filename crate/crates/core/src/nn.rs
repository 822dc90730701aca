//! Affine layers and helpers for walking parameter trees.
//!
//! Parameter structs are generic over the value type so the same layout holds
//! plain tensors (`V = Tensor`) or tape handles (`V = Var`). Every struct
//! exposes `map` to convert between the two and `visit`/`visit_mut` to walk
//! leaves in a fixed, named order.

use crate::error::Result;
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type Visitor<'a, V> = dyn FnMut(&str, &V) + 'a;
pub type VisitorMut<'a, V> = dyn FnMut(&str, &mut V) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<V> {
    pub weight: V,
    pub bias: V,
}

impl Linear<Tensor> {
    /// Gaussian weights with std `1/sqrt(in)`, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[input, output], 1.0 / (input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl<V> Linear<V> {
    pub fn apply<G: Graph<Value = V>>(&self, g: &mut G, x: &V) -> Result<V> {
        let xw = g.matmul(x, &self.weight)?;
        g.add_row(&xw, &self.bias)
    }

    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> Linear<W> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

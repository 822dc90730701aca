//! Pyramid positional encoding: multi-scale depthwise convolutions over the
//! token sequence laid out on a square grid.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{join, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One `k*k x D` depthwise kernel per pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct PpegParams<V> {
    pub kernels: Vec<V>,
}

impl PpegParams<Tensor> {
    pub fn new(dim: usize, sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut kernels = Vec::with_capacity(sizes.len());
        for &k in sizes {
            if k % 2 == 0 {
                return Err(Error::Config(format!("ppeg kernel size {k} is not odd")));
            }
            kernels.push(Tensor::randn(&[k * k, dim], 1.0 / (k * k) as f64, rng));
        }
        Ok(PpegParams { kernels })
    }

    pub fn zeros(dim: usize, sizes: &[usize]) -> Self {
        PpegParams {
            kernels: sizes.iter().map(|&k| Tensor::zeros(&[k * k, dim])).collect(),
        }
    }
}

impl<V> PpegParams<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> PpegParams<W> {
        PpegParams {
            kernels: self.kernels.iter().map(|k| f(k)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        for (i, k) in self.kernels.iter().enumerate() {
            f(&join(prefix, &format!("kernel{i}")), k);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        for (i, k) in self.kernels.iter_mut().enumerate() {
            f(&join(prefix, &format!("kernel{i}")), k);
        }
    }
}

/// Side of the smallest square grid holding `m` tokens.
pub fn grid_side(m: usize) -> usize {
    let mut s = (m as f64).sqrt() as usize;
    while s * s < m {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= m {
        s -= 1;
    }
    s
}

/// Token order of the padded grid: the sequence followed by its leading tokens.
pub fn padded_indices(m: usize) -> Vec<usize> {
    let s = grid_side(m);
    (0..s * s).map(|i| if i < m { i } else { (i - m) % m }).collect()
}

/// `grid + sum_k conv_k(grid)` on the padded grid, truncated back to `M` tokens.
pub fn ppeg<G: Graph>(g: &mut G, x: &G::Value, params: &PpegParams<G::Value>) -> Result<G::Value> {
    let m = g.value(x).dims2("ppeg")?.0;
    if m == 0 {
        return Err(Error::EmptyBag("ppeg"));
    }
    let side = grid_side(m);
    let grid = g.gather_rows(x, &padded_indices(m))?;
    let mut acc = grid.clone();
    for kernel in &params.kernels {
        let conv = g.depthwise_conv2d(&grid, kernel, side)?;
        acc = g.add(&acc, &conv)?;
    }
    let keep: Vec<usize> = (0..m).collect();
    g.gather_rows(&acc, &keep)
}

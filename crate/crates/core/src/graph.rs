//! Backend abstraction shared by every layer in the crate.
//!
//! Layers are written once against [`Graph`]. Running them on [`Eval`]
//! computes plain tensors with no bookkeeping; running them on
//! [`crate::tape::Tape`] records every operation for reverse-mode
//! differentiation. Both backends call the same forward kernels, so their
//! values agree exactly.

use crate::error::Result;
use crate::tensor::Tensor;

pub trait Graph {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a * b^T`.
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Broadcasts a `1 x n` row over the rows of `a`.
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn gelu(&mut self, a: &Self::Value) -> Self::Value;
    fn softmax_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(&mut self, a: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn gather_rows(&mut self, a: &Self::Value, indices: &[usize]) -> Result<Self::Value>;
    fn sum_all(&mut self, a: &Self::Value) -> Self::Value;
    fn mean_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn max_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn depthwise_conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        side: usize,
    ) -> Result<Self::Value>;
    /// Numerically stable binary cross-entropy of a scalar logit.
    fn bce_with_logits(&mut self, logit: &Self::Value, target: f64) -> Result<Self::Value>;

    fn shape<'a>(&'a self, v: &'a Self::Value) -> &'a [usize] {
        self.value(v).shape()
    }
}

/// Tape-free evaluation on owned tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Value = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul_nt(b)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        a.transpose()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        a.add_row(row)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.scale(c)
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.tanh()
    }

    fn gelu(&mut self, a: &Tensor) -> Tensor {
        a.gelu()
    }

    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        a.softmax_rows()
    }

    fn layer_norm(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        a.layer_norm(eps)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        a.slice_cols(start, end)
    }

    fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        a.gather_rows(indices)
    }

    fn sum_all(&mut self, a: &Tensor) -> Tensor {
        a.sum_all()
    }

    fn mean_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        a.mean_rows()
    }

    fn max_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.max_rows()?.0)
    }

    fn depthwise_conv2d(&mut self, x: &Tensor, kernel: &Tensor, side: usize) -> Result<Tensor> {
        x.depthwise_conv2d(kernel, side)
    }

    fn bce_with_logits(&mut self, logit: &Tensor, target: f64) -> Result<Tensor> {
        Ok(Tensor::scalar(bce_with_logits(logit.item()?, target)))
    }
}

pub(crate) fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

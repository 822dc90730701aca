//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every node stores its forward value. Inputs of a node always have smaller
//! indices, so walking the list backwards visits nodes in reverse topological
//! order.

use crate::error::{Error, Result};
use crate::graph::{self, Graph};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    MeanRows(usize),
    MaxRows(usize, Vec<usize>),
    Conv(usize, usize, usize),
    Bce(usize, f64),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Conv(a, b, _) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Tanh(a) | Gelu(a) | Softmax(a) | LayerNorm(a, _)
            | SliceCols(a, _) | GatherRows(a, _) | SumAll(a) | MeanRows(a) | MaxRows(a, _)
            | Bce(a, _) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let mut t = t.detached();
        t.set_requires_grad(true);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Populates gradients of `loss` on every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let out = &self.nodes[i].value;
        let gt = || Tensor::from_parts(out.shape().to_vec(), g.to_vec());
        let grads = match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let gt = gt();
                let da = gt.matmul_nt(self.val(*b))?;
                let db = self.val(*a).matmul_tn(&gt)?;
                vec![(*a, da.into_data()), (*b, db.into_data())]
            }
            Op::MatMulNt(a, b) => {
                let gt = gt();
                let da = gt.matmul(self.val(*b))?;
                let db = gt.matmul_tn(self.val(*a))?;
                vec![(*a, da.into_data()), (*b, db.into_data())]
            }
            Op::Transpose(a) => vec![(*a, gt().transpose()?.into_data())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let da = g.iter().zip(vb).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(va).map(|(g, a)| g * a).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, row) => {
                let n = out.cols();
                let mut drow = vec![0.0; n];
                for chunk in g.chunks(n) {
                    drow.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                vec![(*a, g.to_vec()), (*row, drow)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Tanh(a) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![(*a, d)]
            }
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * tensor::gelu_derivative(x))
                    .collect();
                vec![(*a, d)]
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (g - s);
                    }
                }
                vec![(*a, d)]
            }
            Op::LayerNorm(a, eps) => {
                let n = out.cols();
                let x = self.val(*a).data();
                let mut d = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let span = r * n..(r + 1) * n;
                    let (_, inv_std) = tensor::row_moments(&x[span.clone()], *eps);
                    let (grow, yrow) = (&g[span.clone()], &out.data()[span.clone()]);
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for ((d, g), y) in d[span].iter_mut().zip(grow).zip(yrow) {
                        *d = inv_std * (g - mean_g - y * mean_gy);
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.val(p).numel();
                        let slice = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, slice)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut d = Vec::with_capacity(out.rows() * w);
                    for row in g.chunks(n) {
                        d.extend_from_slice(&row[start..start + w]);
                    }
                    start += w;
                    res.push((p, d));
                }
                res
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.val(*a).cols();
                let w = out.cols();
                let mut d = vec![0.0; self.val(*a).numel()];
                for (r, row) in g.chunks(w).enumerate() {
                    d[r * src_cols + start..r * src_cols + start + w].copy_from_slice(row);
                }
                vec![(*a, d)]
            }
            Op::GatherRows(a, indices) => {
                let n = out.cols();
                let mut d = vec![0.0; self.val(*a).numel()];
                for (row, &src) in g.chunks(n).zip(indices) {
                    d[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, v)| *d += v);
                }
                vec![(*a, d)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.val(*a).numel()])],
            Op::MeanRows(a) => {
                let m = self.val(*a).rows();
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                vec![(*a, row.repeat(m))]
            }
            Op::MaxRows(a, arg) => {
                let n = out.cols();
                let mut d = vec![0.0; self.val(*a).numel()];
                for (j, &r) in arg.iter().enumerate() {
                    d[r * n + j] = g[j];
                }
                vec![(*a, d)]
            }
            Op::Conv(x, k, side) => {
                let (dx, dk) = conv_backward(self.val(*x), self.val(*k), *side, g)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::Bce(a, target) => {
                let z = self.val(*a).data()[0];
                vec![(*a, vec![g[0] * (graph::sigmoid(z) - target)])]
            }
        };
        Ok(grads)
    }
}

fn conv_backward(x: &Tensor, kernel: &Tensor, side: usize, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = x.cols();
    let k = tensor::conv_kernel_size(kernel.rows())?;
    let r = (k / 2) as isize;
    let s = side as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for y in 0..s {
        for xx in 0..s {
            let o = ((y * s + xx) as usize) * c;
            for dy in 0..k as isize {
                let sy = y + dy - r;
                if !(0..s).contains(&sy) {
                    continue;
                }
                for dxo in 0..k as isize {
                    let sx = xx + dxo - r;
                    if !(0..s).contains(&sx) {
                        continue;
                    }
                    let src = ((sy * s + sx) as usize) * c;
                    let w = ((dy * k as isize + dxo) as usize) * c;
                    for ch in 0..c {
                        dx[src + ch] += kd[w + ch] * g[o + ch];
                        dk[w + ch] += xd[src + ch] * g[o + ch];
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

impl Graph for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).matmul(self.val(b.0))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).matmul_nt(self.val(b.0))?;
        Ok(self.push(v, Op::MatMulNt(a.0, b.0)))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let v = self.val(a.0).transpose()?;
        Ok(self.push(v, Op::Transpose(a.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).add(self.val(b.0))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).sub(self.val(b.0))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).mul(self.val(b.0))?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let v = self.val(a.0).add_row(self.val(row.0))?;
        Ok(self.push(v, Op::AddRow(a.0, row.0)))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = self.val(a.0).scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).tanh();
        self.push(v, Op::Tanh(a.0))
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).gelu();
        self.push(v, Op::Gelu(a.0))
    }

    fn softmax_rows(&mut self, a: &Var) -> Result<Var> {
        let v = self.val(a.0).softmax_rows()?;
        Ok(self.push(v, Op::Softmax(a.0)))
    }

    fn layer_norm(&mut self, a: &Var, eps: f64) -> Result<Var> {
        let v = self.val(a.0).layer_norm(eps)?;
        Ok(self.push(v, Op::LayerNorm(a.0, eps)))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor::concat_rows(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let v = self.val(a.0).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols(a.0, start)))
    }

    fn gather_rows(&mut self, a: &Var, indices: &[usize]) -> Result<Var> {
        let v = self.val(a.0).gather_rows(indices)?;
        Ok(self.push(v, Op::GatherRows(a.0, indices.to_vec())))
    }

    fn sum_all(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).sum_all();
        self.push(v, Op::SumAll(a.0))
    }

    fn mean_rows(&mut self, a: &Var) -> Result<Var> {
        let v = self.val(a.0).mean_rows()?;
        Ok(self.push(v, Op::MeanRows(a.0)))
    }

    fn max_rows(&mut self, a: &Var) -> Result<Var> {
        let (v, arg) = self.val(a.0).max_rows()?;
        Ok(self.push(v, Op::MaxRows(a.0, arg)))
    }

    fn depthwise_conv2d(&mut self, x: &Var, kernel: &Var, side: usize) -> Result<Var> {
        let v = self.val(x.0).depthwise_conv2d(self.val(kernel.0), side)?;
        Ok(self.push(v, Op::Conv(x.0, kernel.0, side)))
    }

    fn bce_with_logits(&mut self, logit: &Var, target: f64) -> Result<Var> {
        let z = self.val(logit.0).item()?;
        let v = Tensor::scalar(graph::bce_with_logits(z, target));
        Ok(self.push(v, Op::Bce(logit.0, target)))
    }
}

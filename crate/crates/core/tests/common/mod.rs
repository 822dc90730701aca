//! Test-only oracles: finite differences, scalar-loop attention and
//! permutation enumeration. Nothing here calls the backward rules or the
//! vectorized kernels it is used to check.
#![allow(dead_code)]

use mivpg::{Graph, Result, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Gradient groups whose analytic and numeric norms are both below this are
/// compared absolutely (e.g. key biases, which softmax is blind to).
pub const ZERO_GRAD_NORM: f64 = 1e-7;

/// `sum(out .* W)` for a fixed pseudo-random weight `W`, so that gradients are
/// not trivially uniform.
pub fn probe_loss(tape: &mut Tape, out: &Var, seed: u64) -> Result<Var> {
    let shape = tape.tensor(*out).shape().to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, &w)?;
    Ok(tape.sum_all(&prod))
}

#[derive(Debug)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    /// Norm-wise relative error `|a - n| / (|a| + |n|)` of input `i`.
    pub fn rel_err(&self, i: usize) -> f64 {
        rel_err(&self.analytic[i], &self.numeric[i])
    }

    pub fn max_rel_err(&self) -> f64 {
        (0..self.analytic.len()).map(|i| self.rel_err(i)).fold(0.0, f64::max)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(a, n)| a - n).collect();
    let (na, nn) = (norm(a), norm(n));
    if na.max(nn) < ZERO_GRAD_NORM {
        return norm(&diff);
    }
    norm(&diff) / (na + nn)
}

/// Backward-pass gradients of `f` next to central differences of its value.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic = vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();

    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).expect("forward");
        tape.tensor(loss).item().unwrap()
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut vals = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&vals);
            vals[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * FD_STEP);
        }
        numeric.push(g);
    }
    GradCheck { analytic, numeric }
}

/// Softmax attention by explicit loops: `out[i] = sum_j a_ij v_j`.
pub fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let (r1, d) = (q.rows(), q.cols());
    let r2 = k.rows();
    let mut w = vec![0.0; r1 * r2];
    let mut out = vec![0.0; r1 * v.cols()];
    for i in 0..r1 {
        let scores: Vec<f64> = (0..r2)
            .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..r2 {
            w[i * r2 + j] = exps[j] / z;
            for c in 0..v.cols() {
                out[i * v.cols() + c] += exps[j] / z * v.get(j, c);
            }
        }
    }
    (
        Tensor::matrix(r1, v.cols(), out).unwrap(),
        Tensor::matrix(r1, r2, w).unwrap(),
    )
}

/// `x W + b` by explicit loops.
pub fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = b.get(0, j) + (0..k).map(|p| x.get(i, p) * w.get(p, j)).sum::<f64>();
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// Multi-head attention by explicit loops over heads.
pub fn mha_oracle(
    p: &mivpg::attention::AttentionParams<Tensor>,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
) -> Tensor {
    let q = linear_oracle(q_in, &p.query.weight, &p.query.bias);
    let k = linear_oracle(k_in, &p.key.weight, &p.key.bias);
    let v = linear_oracle(v_in, &p.value.weight, &p.value.bias);
    let d = q.cols();
    let hd = d / p.num_heads;
    let mut merged = vec![0.0; q.rows() * d];
    for h in 0..p.num_heads {
        let cols = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|i| (h * hd..(h + 1) * hd).map(|c| t.get(i, c)).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (o, _) = attention_oracle(&cols(&q), &cols(&k), &cols(&v));
        for i in 0..q.rows() {
            for c in 0..hd {
                merged[i * d + h * hd + c] = o.get(i, c);
            }
        }
    }
    let merged = Tensor::matrix(q.rows(), d, merged).unwrap();
    linear_oracle(&merged, &p.output.weight, &p.output.bias)
}

/// Row-wise layer norm by explicit loops.
pub fn layer_norm_oracle(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
    }
    Tensor::matrix(x.rows(), n, out).unwrap()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { break };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn eval_value<G: Graph>(g: &G, v: &G::Value) -> Tensor {
    g.value(v).detached()
}

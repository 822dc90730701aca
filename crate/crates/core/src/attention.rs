//! Scaled dot-product attention, its multi-head form, and the query-residual
//! cross-attention layer.

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::macs::{self, Category};
use crate::nn::{join, Linear, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Projections `D -> D` for queries, keys, values and output, with biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<V> {
    pub query: Linear<V>,
    pub key: Linear<V>,
    pub value: Linear<V>,
    pub output: Linear<V>,
    pub num_heads: usize,
}

impl AttentionParams<Tensor> {
    pub fn new(dim: usize, num_heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(dim, num_heads)?;
        Ok(AttentionParams {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            num_heads,
        })
    }

    /// Identity projections with zero bias.
    pub fn identity(dim: usize, num_heads: usize) -> Result<Self> {
        check_heads(dim, num_heads)?;
        let id = || Linear {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(&[1, dim]),
        };
        Ok(AttentionParams {
            query: id(),
            key: id(),
            value: id(),
            output: id(),
            num_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.num_heads
    }
}

fn check_heads(dim: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {dim} is not divisible by {num_heads} heads"
        )));
    }
    Ok(())
}

impl<V> AttentionParams<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> AttentionParams<W> {
        AttentionParams {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            num_heads: self.num_heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Per-head attention weights stacked as `heads x R1 x R2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub fn from_heads(heads: &[Tensor]) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::Contract("attention map without heads".into()))?;
        let (r1, r2) = first.dims2("AttentionMap")?;
        let mut data = Vec::with_capacity(heads.len() * r1 * r2);
        for h in heads {
            if h.shape() != first.shape() {
                return Err(Error::shape("AttentionMap", first.shape(), h.shape()));
            }
            data.extend_from_slice(h.data());
        }
        Tensor::new(vec![heads.len(), r1, r2], data).map(|weights| AttentionMap { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn head(&self, h: usize) -> Tensor {
        let (r1, r2) = (self.weights.shape()[1], self.weights.shape()[2]);
        let data = self.weights.data()[h * r1 * r2..(h + 1) * r1 * r2].to_vec();
        Tensor::from_parts(vec![r1, r2], data)
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let r2 = self.weights.shape()[2];
        self.weights
            .data()
            .chunks(r2)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with `d` the column count of `Q`.
///
/// Returns the output and the `R1 x R2` attention weights.
pub fn scaled_dot_attention<G: Graph>(
    g: &mut G,
    q: &G::Value,
    k: &G::Value,
    v: &G::Value,
) -> Result<(G::Value, G::Value)> {
    let (_, d) = g.value(q).dims2("scaled_dot_attention")?;
    let (keys, dk) = g.value(k).dims2("scaled_dot_attention")?;
    let (values, _) = g.value(v).dims2("scaled_dot_attention")?;
    if keys == 0 {
        return Err(Error::EmptyBag("scaled_dot_attention"));
    }
    if dk != d || values != keys {
        return Err(Error::shape("scaled_dot_attention", g.shape(k), g.shape(v)));
    }
    let q_scaled = g.scale(q, 1.0 / (d as f64).sqrt());
    let _corr = macs::enter(Category::Correlation);
    let scores = g.matmul_nt(&q_scaled, k)?;
    let weights = g.softmax_rows(&scores)?;
    drop(scores);
    let out = g.matmul(&weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention; also returns each head's weights.
pub fn multi_head_attention<G: Graph>(
    g: &mut G,
    params: &AttentionParams<G::Value>,
    q_in: &G::Value,
    k_in: &G::Value,
    v_in: &G::Value,
) -> Result<(G::Value, Vec<G::Value>)> {
    mha(g, params, q_in, k_in, v_in, true)
}

/// Multi-head attention output without retaining the weights.
pub fn attend<G: Graph>(
    g: &mut G,
    params: &AttentionParams<G::Value>,
    q_in: &G::Value,
    k_in: &G::Value,
    v_in: &G::Value,
) -> Result<G::Value> {
    mha(g, params, q_in, k_in, v_in, false).map(|(out, _)| out)
}

fn mha<G: Graph>(
    g: &mut G,
    params: &AttentionParams<G::Value>,
    q_in: &G::Value,
    k_in: &G::Value,
    v_in: &G::Value,
    keep_maps: bool,
) -> Result<(G::Value, Vec<G::Value>)> {
    if g.value(k_in).rows() == 0 {
        return Err(Error::EmptyBag("multi_head_attention"));
    }
    let q = params.query.apply(g, q_in)?;
    let k = params.key.apply(g, k_in)?;
    let v = params.value.apply(g, v_in)?;
    let h = params.num_heads;
    let dim = g.value(&q).cols();
    let hd = dim / h;

    let mut heads = Vec::with_capacity(h);
    let mut maps = Vec::new();
    for i in 0..h {
        let (out, weights) = if h == 1 {
            scaled_dot_attention(g, &q, &k, &v)?
        } else {
            let qh = g.slice_cols(&q, i * hd, (i + 1) * hd)?;
            let kh = g.slice_cols(&k, i * hd, (i + 1) * hd)?;
            let vh = g.slice_cols(&v, i * hd, (i + 1) * hd)?;
            scaled_dot_attention(g, &qh, &kh, &vh)?
        };
        heads.push(out);
        if keep_maps {
            maps.push(weights);
        }
    }
    let merged = if h == 1 {
        heads.pop().expect("one head")
    } else {
        g.concat_cols(&heads)?
    };
    let out = params.output.apply(g, &merged)?;
    Ok((out, maps))
}

/// `q + MHA(q, bag, bag)`: learnable queries pooling a bag of instances.
pub fn query_residual_cross_attention<G: Graph>(
    g: &mut G,
    queries: &G::Value,
    bag: &G::Value,
    params: &AttentionParams<G::Value>,
) -> Result<G::Value> {
    if g.value(bag).rows() == 0 {
        return Err(Error::EmptyBag("query_residual_cross_attention"));
    }
    let update = attend(g, params, queries, bag, bag)?;
    g.add(queries, &update)
}

/// Tape-free multi-head attention returning the stacked map.
pub fn multi_head_attention_eval(
    params: &AttentionParams<Tensor>,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
) -> Result<(Tensor, AttentionMap)> {
    let (out, maps) = multi_head_attention(&mut Eval, params, q_in, k_in, v_in)?;
    Ok((out, AttentionMap::from_heads(&maps)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<const N: usize>(rows: &[[f64; N]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let q = t(&[[0.3, -1.2], [2.0, 0.1]]);
        let k = t(&[[0.5, 0.5]]);
        let v = t(&[[7.0, -3.0]]);
        let (out, w) = scaled_dot_attention(&mut Eval, &q, &k, &v).unwrap();
        assert_eq!(out, t(&[[7.0, -3.0], [7.0, -3.0]]));
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[[1.0, 2.0]]);
        let k = t(&[[0.4, 0.1], [0.4, 0.1], [0.4, 0.1]]);
        let v = t(&[[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]]);
        let (out, _) = scaled_dot_attention(&mut Eval, &q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&t(&[[3.0, 2.0]])) < 1e-12);
    }

    #[test]
    fn two_key_example() {
        // softmax([1/sqrt2, 0]) = [0.66977, 0.33023]
        let q = t(&[[1.0, 0.0]]);
        let kv = Tensor::identity(2);
        let (out, _) = scaled_dot_attention(&mut Eval, &q, &kv, &kv).unwrap();
        assert!((out.get(0, 0) - 0.6698).abs() < 1e-4);
        assert!((out.get(0, 1) - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn empty_keys_are_an_error() {
        let q = t(&[[1.0, 0.0]]);
        let k = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            scaled_dot_attention(&mut Eval, &q, &k, &k),
            Err(Error::EmptyBag(_))
        ));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = Rng::new(0);
        assert!(matches!(AttentionParams::new(6, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_value_projection_leaves_queries() {
        let mut rng = Rng::new(5);
        let mut p = AttentionParams::new(2, 1, &mut rng).unwrap();
        p.value.weight = Tensor::zeros(&[2, 2]);
        p.output.bias = Tensor::zeros(&[1, 2]);
        let q = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let bag = Tensor::zeros(&[1, 2]);
        let out = query_residual_cross_attention(&mut Eval, &q, &bag, &p).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn map_rows_are_stochastic() {
        let mut rng = Rng::new(8);
        let p = AttentionParams::new(8, 4, &mut rng).unwrap();
        let q = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (_, map) = multi_head_attention_eval(&p, &q, &kv, &kv).unwrap();
        assert_eq!(map.weights().shape(), &[4, 3, 5]);
        assert!(map.max_row_sum_error() < 1e-12);
        assert!(map.weights().data().iter().all(|w| (0.0..=1.0).contains(w)));
    }
}

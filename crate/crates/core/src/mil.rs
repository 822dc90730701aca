//! Embedding-level MIL pooling and the permutation-equivariant set layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::nn::{join, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_ATTENTION_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Mean,
    Max,
    ClsSelect,
    AbMil,
}

/// A bag aggregator. `AbMil` holds `w: L_a x 1` and `u: L_a x D`.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolingSpec<V> {
    Mean,
    Max,
    ClsSelect { index: usize },
    AbMil { w: V, u: V },
}

impl PoolingSpec<Tensor> {
    pub fn ab_mil(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        PoolingSpec::AbMil {
            w: Tensor::randn(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), rng),
            u: Tensor::randn(&[hidden, dim], 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn from_kind(kind: PoolingKind, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        match kind {
            PoolingKind::Mean => PoolingSpec::Mean,
            PoolingKind::Max => PoolingSpec::Max,
            PoolingKind::ClsSelect => PoolingSpec::ClsSelect { index: 0 },
            PoolingKind::AbMil => PoolingSpec::ab_mil(dim, hidden, rng),
        }
    }
}

impl<V> PoolingSpec<V> {
    pub fn kind(&self) -> PoolingKind {
        match self {
            PoolingSpec::Mean => PoolingKind::Mean,
            PoolingSpec::Max => PoolingKind::Max,
            PoolingSpec::ClsSelect { .. } => PoolingKind::ClsSelect,
            PoolingSpec::AbMil { .. } => PoolingKind::AbMil,
        }
    }

    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> PoolingSpec<W> {
        match self {
            PoolingSpec::Mean => PoolingSpec::Mean,
            PoolingSpec::Max => PoolingSpec::Max,
            PoolingSpec::ClsSelect { index } => PoolingSpec::ClsSelect { index: *index },
            PoolingSpec::AbMil { w, u } => PoolingSpec::AbMil { w: f(w), u: f(u) },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        if let PoolingSpec::AbMil { w, u } = self {
            f(&join(prefix, "w"), w);
            f(&join(prefix, "u"), u);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        if let PoolingSpec::AbMil { w, u } = self {
            f(&join(prefix, "w"), w);
            f(&join(prefix, "u"), u);
        }
    }
}

/// Pooled bag vector and, for weighted pooling, the weights used.
#[derive(Debug, Clone, PartialEq)]
pub struct BagEmbedding {
    pub vector: Tensor,
    pub weights: Option<Tensor>,
}

/// AB-MIL weights `softmax_i(w^T tanh(u x_i^T))` as a `1 x M` row.
pub fn ab_mil_weights<G: Graph>(
    g: &mut G,
    spec: &PoolingSpec<G::Value>,
    bag: &G::Value,
) -> Result<G::Value> {
    let PoolingSpec::AbMil { w, u } = spec else {
        return Err(Error::Config(format!(
            "ab_mil_weights needs an ab_mil spec, got {:?}",
            spec.kind()
        )));
    };
    let (m, d) = g.value(bag).dims2("ab_mil_weights")?;
    if m == 0 {
        return Err(Error::EmptyBag("ab_mil_weights"));
    }
    let (hidden, ud) = g.value(u).dims2("ab_mil_weights")?;
    let (wh, wc) = g.value(w).dims2("ab_mil_weights")?;
    if ud != d || wh != hidden || wc != 1 {
        return Err(Error::Config(format!(
            "ab_mil parameters u {:?} / w {:?} do not fit instance dimension {d}",
            g.shape(u),
            g.shape(w)
        )));
    }
    let hidden_act = g.matmul_nt(bag, u)?;
    let hidden_act = g.tanh(&hidden_act);
    let scores = g.matmul(&hidden_act, w)?;
    let scores = g.transpose(&scores)?;
    g.softmax_rows(&scores)
}

/// Pools an `M x D` bag into a `1 x D` row; returns AB-MIL weights when used.
pub fn pool<G: Graph>(
    g: &mut G,
    spec: &PoolingSpec<G::Value>,
    bag: &G::Value,
) -> Result<(G::Value, Option<G::Value>)> {
    let m = g.value(bag).dims2("pool_bag")?.0;
    if m == 0 {
        return Err(Error::EmptyBag("pool_bag"));
    }
    match spec {
        PoolingSpec::Mean => Ok((g.mean_rows(bag)?, None)),
        PoolingSpec::Max => Ok((g.max_rows(bag)?, None)),
        PoolingSpec::ClsSelect { index } => {
            if *index >= m {
                return Err(Error::Index { index: *index, len: m });
            }
            Ok((g.gather_rows(bag, &[*index])?, None))
        }
        PoolingSpec::AbMil { .. } => {
            let alpha = ab_mil_weights(g, spec, bag)?;
            let pooled = g.matmul(&alpha, bag)?;
            Ok((pooled, Some(alpha)))
        }
    }
}

pub fn pool_bag(spec: &PoolingSpec<Tensor>, bag: &Tensor) -> Result<BagEmbedding> {
    let (pooled, alpha) = pool(&mut Eval, spec, bag)?;
    let d = pooled.cols();
    Ok(BagEmbedding {
        vector: pooled.reshape(&[d])?,
        weights: alpha.map(|a| a.reshape(&[a.numel()])).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply<G: Graph>(self, g: &mut G, x: &G::Value) -> G::Value {
        match self {
            Activation::Identity => x.clone(),
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Row `i` becomes `act(lambda * x_i + gamma * pool(x))`.
pub fn perm_equivalence_layer<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: &PoolingSpec<G::Value>,
    lambda: f64,
    gamma: f64,
    activation: Activation,
) -> Result<G::Value> {
    let (pooled, _) = pool(g, spec, x)?;
    let own = g.scale(x, lambda);
    let shared = g.scale(&pooled, gamma);
    let pre = g.add_row(&own, &shared)?;
    Ok(activation.apply(g, &pre))
}

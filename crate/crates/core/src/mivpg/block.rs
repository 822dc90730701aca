//! One MIVPG transformer block and the bag-correlation layers it can use.

use crate::attention::{attend, multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{join, Linear, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

use super::config::{CsaSource, MivpgConfig};

/// Correlated self-attention: `LN(B + MHA(Q=B, K=q, V=q))`.
///
/// Each instance attends to the `R` query embeddings instead of to the other
/// `M` instances, so the cost is `O(M R)` and the map is row-equivariant in `B`.
pub fn csa_update<G: Graph>(
    g: &mut G,
    bag: &G::Value,
    queries: &G::Value,
    params: &AttentionParams<G::Value>,
) -> Result<G::Value> {
    if g.value(bag).rows() == 0 {
        return Err(Error::EmptyBag("csa_update"));
    }
    let update = attend(g, params, bag, queries, queries)?;
    let sum = g.add(bag, &update)?;
    g.layer_norm(&sum, LAYER_NORM_EPS)
}

/// Two-stage attention through a learnable probe of `M'` rows: the probe
/// summarizes the bag, then every instance reads the summary back.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankParams<V> {
    pub compress: AttentionParams<V>,
    pub expand: AttentionParams<V>,
}

impl LowRankParams<Tensor> {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(LowRankParams {
            compress: AttentionParams::new(dim, heads, rng)?,
            expand: AttentionParams::new(dim, heads, rng)?,
        })
    }
}

impl<V> LowRankParams<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> LowRankParams<W> {
        LowRankParams {
            compress: self.compress.map(f),
            expand: self.expand.map(f),
        }
    }
}

pub fn low_rank_self_attention<G: Graph>(
    g: &mut G,
    bag: &G::Value,
    probe: &G::Value,
    params: &LowRankParams<G::Value>,
) -> Result<G::Value> {
    if g.value(probe).rows() == 0 {
        return Err(Error::Config("low-rank probe needs at least one row".into()));
    }
    let summary = attend(g, &params.compress, probe, bag, bag)?;
    attend(g, &params.expand, bag, &summary, &summary)
}

/// Full pairwise self-attention over the bag, `O(M^2)`.
pub fn full_self_attention<G: Graph>(
    g: &mut G,
    bag: &G::Value,
    params: &AttentionParams<G::Value>,
) -> Result<G::Value> {
    attend(g, params, bag, bag, bag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<V> {
    pub queries: V,
    pub bag: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<V> {
    pub self_attn: AttentionParams<V>,
    pub csa: Option<AttentionParams<V>>,
    pub cross_attn: Option<AttentionParams<V>>,
    pub ffn_in: Linear<V>,
    pub ffn_out: Linear<V>,
}

impl BlockParams<Tensor> {
    pub fn new(config: &MivpgConfig, block_index: usize, rng: &mut Rng) -> Result<Self> {
        let d = config.model_dim;
        let h = config.heads;
        Ok(BlockParams {
            self_attn: AttentionParams::new(d, h, rng)?,
            csa: if config.use_csa {
                Some(AttentionParams::new(d, h, rng)?)
            } else {
                None
            },
            cross_attn: if config.has_cross_attention(block_index) {
                Some(AttentionParams::new(d, h, rng)?)
            } else {
                None
            },
            ffn_in: Linear::new(d, config.ffn_hidden(), rng),
            ffn_out: Linear::new(config.ffn_hidden(), d, rng),
        })
    }
}

impl<V> BlockParams<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> BlockParams<W> {
        BlockParams {
            self_attn: self.self_attn.map(f),
            csa: self.csa.as_ref().map(|p| p.map(f)),
            cross_attn: self.cross_attn.as_ref().map(|p| p.map(f)),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        if let Some(p) = &self.csa {
            p.visit(&join(prefix, "csa"), f);
        }
        if let Some(p) = &self.cross_attn {
            p.visit(&join(prefix, "cross_attn"), f);
        }
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        if let Some(p) = &mut self.csa {
            p.visit_mut(&join(prefix, "csa"), f);
        }
        if let Some(p) = &mut self.cross_attn {
            p.visit_mut(&join(prefix, "cross_attn"), f);
        }
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
    }
}

pub struct BlockOutput<V> {
    pub state: BlockState<V>,
    /// Per-head `R x M` cross-attention weights, when the block has cross-attention.
    pub cross_attention: Option<Vec<V>>,
}

/// Query self-attention, optional CSA bag update, cross-attention on
/// scheduled blocks, then the feed-forward sublayer; each sublayer is
/// residual and layer-normalized.
pub fn mivpg_block<G: Graph>(
    g: &mut G,
    state: &BlockState<G::Value>,
    block_index: usize,
    config: &MivpgConfig,
    params: &BlockParams<G::Value>,
) -> Result<BlockOutput<G::Value>> {
    let q = &state.queries;
    let sa = attend(g, &params.self_attn, q, q, q)?;
    let sa = g.add(q, &sa)?;
    let q1 = g.layer_norm(&sa, LAYER_NORM_EPS)?;

    let bag = if config.use_csa {
        let csa = params
            .csa
            .as_ref()
            .ok_or_else(|| Error::Config(format!("block {block_index} has no CSA parameters")))?;
        let source = match config.csa_source {
            CsaSource::Previous => q,
            CsaSource::Current => &q1,
        };
        csa_update(g, &state.bag, source, csa)?
    } else {
        state.bag.clone()
    };

    let (q2, cross_attention) = if config.has_cross_attention(block_index) {
        let cross = params.cross_attn.as_ref().ok_or_else(|| {
            Error::Config(format!("block {block_index} has no cross-attention parameters"))
        })?;
        let (upd, maps) = multi_head_attention(g, cross, &q1, &bag, &bag)?;
        let sum = g.add(&q1, &upd)?;
        (g.layer_norm(&sum, LAYER_NORM_EPS)?, Some(maps))
    } else {
        (q1, None)
    };

    let hidden = params.ffn_in.apply(g, &q2)?;
    let hidden = g.gelu(&hidden);
    let ff = params.ffn_out.apply(g, &hidden)?;
    let sum = g.add(&q2, &ff)?;
    let q3 = g.layer_norm(&sum, LAYER_NORM_EPS)?;

    Ok(BlockOutput {
        state: BlockState { queries: q3, bag },
        cross_attention,
    })
}

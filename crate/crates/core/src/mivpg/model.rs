use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mil::{self, PoolingSpec};
use crate::nn::{join, Linear, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::bag::{Bag, Scenario};
use super::block::{mivpg_block, BlockParams, BlockState};
use super::config::MivpgConfig;
use super::ppeg::{ppeg, PpegParams};

pub const QUERY_INIT_STD: f64 = 0.02;

/// Learnable query embeddings, `R x D`, drawn from N(0, 0.02^2).
pub fn init_queries(config: &MivpgConfig, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[config.num_queries, config.model_dim], QUERY_INIT_STD, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MivpgParams<V> {
    pub queries: V,
    /// Affine map from instance width `D_I` to model width `D`.
    pub input_proj: Linear<V>,
    /// Patch-to-image pooling for bags with several patches per image.
    pub image_pool: PoolingSpec<V>,
    pub ppeg: Option<PpegParams<V>>,
    pub blocks: Vec<BlockParams<V>>,
}

impl MivpgParams<Tensor> {
    pub fn new(config: &MivpgConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let queries = init_queries(config, rng);
        let input_proj = Linear::new(config.instance_dim(), config.model_dim, rng);
        let image_pool = PoolingSpec::from_kind(
            config.image_pooling,
            config.instance_dim(),
            config.abmil_hidden,
            rng,
        );
        let ppeg = if config.use_ppeg {
            Some(PpegParams::new(config.model_dim, &config.ppeg_kernels, rng)?)
        } else {
            None
        };
        let blocks = (0..config.num_blocks)
            .map(|l| BlockParams::new(config, l, rng))
            .collect::<Result<_>>()?;
        Ok(MivpgParams {
            queries,
            input_proj,
            image_pool,
            ppeg,
            blocks,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Every parameter tensor with its dotted name, in visit order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Overwrites every parameter, in visit order, from `values`.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        let mut it = values.iter();
        let mut err = None;
        self.visit_mut("", &mut |name, t| match it.next() {
            Some(v) if v.shape() == t.shape() => *t = v.detached(),
            Some(v) => {
                err.get_or_insert_with(|| Error::shape("assign", t.shape(), v.shape()));
            }
            None => {
                err.get_or_insert_with(|| Error::Contract(format!("no value for {name}")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::Contract("more values than parameters".into()));
        }
        Ok(())
    }

    /// Records every tensor on the tape as a trainable leaf.
    pub fn on_tape(&self, tape: &mut Tape) -> MivpgParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

impl<V> MivpgParams<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> MivpgParams<W> {
        MivpgParams {
            queries: f(&self.queries),
            input_proj: self.input_proj.map(f),
            image_pool: self.image_pool.map(f),
            ppeg: self.ppeg.as_ref().map(|p| p.map(f)),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        f(&join(prefix, "queries"), &self.queries);
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        self.image_pool.visit(&join(prefix, "image_pool"), f);
        if let Some(p) = &self.ppeg {
            p.visit(&join(prefix, "ppeg"), f);
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{l}")), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        f(&join(prefix, "queries"), &mut self.queries);
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        self.image_pool.visit_mut(&join(prefix, "image_pool"), f);
        if let Some(p) = &mut self.ppeg {
            p.visit_mut(&join(prefix, "ppeg"), f);
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{l}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention<V> {
    pub block: usize,
    /// One `R x M` map per head.
    pub heads: Vec<V>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<V> {
    /// Cross-attention maps over the block-level instances, per block.
    pub cross_attention: Vec<BlockAttention<V>>,
    /// Patch weights (`1 x P`) of each image, when patches were pooled.
    pub patch_weights: Vec<V>,
}

impl<V> Diagnostics<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> Diagnostics<W> {
        Diagnostics {
            cross_attention: self
                .cross_attention
                .iter()
                .map(|b| BlockAttention {
                    block: b.block,
                    heads: b.heads.iter().map(&mut f).collect(),
                })
                .collect(),
            patch_weights: self.patch_weights.iter().map(f).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward<V> {
    /// Final query embeddings `q^(L)`, `R x D`.
    pub queries: V,
    /// Block-level instances after the last block.
    pub bag: V,
    pub diagnostics: Diagnostics<V>,
}

impl Forward<Var> {
    pub fn values(&self, tape: &Tape) -> Forward<Tensor> {
        let get = |v: &Var| tape.tensor(*v).detached();
        Forward {
            queries: get(&self.queries),
            bag: get(&self.bag),
            diagnostics: self.diagnostics.map(get),
        }
    }
}

/// Block-level instance embeddings (`M x D`) and any patch weights.
pub fn embed_bag<G: Graph>(
    g: &mut G,
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<G::Value>,
) -> Result<(G::Value, Vec<G::Value>)> {
    let mut patch_weights = Vec::new();
    let instances = match (bag, bag.scenario()) {
        (Bag::Flat(t), _) => g.constant(t.clone()),
        (Bag::Hierarchical(imgs), Scenario::Images) => {
            let rows: Vec<&Tensor> = imgs.iter().collect();
            let stacked = Tensor::concat_rows(&rows)?;
            for _ in imgs {
                patch_weights.push(g.constant(Tensor::scalar(1.0)));
            }
            g.constant(stacked)
        }
        (Bag::Hierarchical(imgs), _) => {
            let mut pooled = Vec::with_capacity(imgs.len());
            for img in imgs {
                let x = g.constant(img.clone());
                let (row, alpha) = mil::pool(g, &params.image_pool, &x)?;
                pooled.push(row);
                if let Some(a) = alpha {
                    patch_weights.push(a);
                }
            }
            g.concat_rows(&pooled)?
        }
    };
    let projected = params.input_proj.apply(g, &instances)?;
    let projected = if config.use_ppeg {
        let p = params
            .ppeg
            .as_ref()
            .ok_or_else(|| Error::Config("use_ppeg is set but no PPEG parameters".into()))?;
        ppeg(g, &projected, p)?
    } else {
        projected
    };
    Ok((projected, patch_weights))
}

/// Runs the block stack on block-level instances.
pub fn run_blocks<G: Graph>(
    g: &mut G,
    instances: G::Value,
    config: &MivpgConfig,
    params: &MivpgParams<G::Value>,
) -> Result<(BlockState<G::Value>, Vec<BlockAttention<G::Value>>)> {
    if params.blocks.len() != config.num_blocks {
        return Err(Error::Config(format!(
            "config has {} blocks, parameters have {}",
            config.num_blocks,
            params.blocks.len()
        )));
    }
    let mut state = BlockState {
        queries: params.queries.clone(),
        bag: instances,
    };
    let mut maps = Vec::new();
    for (l, block) in params.blocks.iter().enumerate() {
        let out = mivpg_block(g, &state, l, config, block)?;
        if let Some(heads) = out.cross_attention {
            maps.push(BlockAttention { block: l, heads });
        }
        state = out.state;
    }
    Ok((state, maps))
}

/// Visual prompt embeddings for a bag, routing by its shape: flat bags feed
/// patches straight to the blocks, single-row images are stacked, and
/// multi-patch images are pooled into one embedding each first.
pub fn mivpg_forward<G: Graph>(
    g: &mut G,
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<G::Value>,
) -> Result<Forward<G::Value>> {
    if bag.instance_dim() != config.instance_dim() {
        return Err(Error::shape(
            "mivpg_forward",
            &[bag.instance_dim()],
            &[config.instance_dim()],
        ));
    }
    let (instances, patch_weights) = embed_bag(g, bag, config, params)?;
    let (state, cross_attention) = run_blocks(g, instances, config, params)?;
    Ok(Forward {
        queries: state.queries,
        bag: state.bag,
        diagnostics: Diagnostics {
            cross_attention,
            patch_weights,
        },
    })
}

/// Baseline that concatenates every patch of every image into one flat
/// sequence, ignoring image boundaries. PPEG is never applied.
pub fn flatten_baseline_forward<G: Graph>(
    g: &mut G,
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<G::Value>,
) -> Result<Forward<G::Value>> {
    if bag.instance_dim() != config.instance_dim() {
        return Err(Error::shape(
            "flatten_baseline_forward",
            &[bag.instance_dim()],
            &[config.instance_dim()],
        ));
    }
    let flat = g.constant(bag.flattened()?);
    let instances = params.input_proj.apply(g, &flat)?;
    let (state, cross_attention) = run_blocks(g, instances, config, params)?;
    Ok(Forward {
        queries: state.queries,
        bag: state.bag,
        diagnostics: Diagnostics {
            cross_attention,
            patch_weights: Vec::new(),
        },
    })
}

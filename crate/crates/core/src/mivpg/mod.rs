//! The MIVPG block stack: learnable queries, correlated self-attention over
//! the bag, cross-attention, PPEG, and hierarchical image-level pooling.

pub mod bag;
pub mod block;
pub mod config;
pub mod model;
pub mod ppeg;

pub use bag::{Bag, Scenario};
pub use block::{
    csa_update, full_self_attention, low_rank_self_attention, mivpg_block, BlockOutput,
    BlockParams, BlockState, LowRankParams,
};
pub use config::{CsaSource, MivpgConfig};
pub use model::{
    embed_bag, flatten_baseline_forward, init_queries, mivpg_forward, run_blocks, BlockAttention,
    Diagnostics, Forward, MivpgParams,
};
pub use ppeg::{ppeg, PpegParams};

//! CSV export of cross-attention maps and patch weights.
//!
//! `cross_attn_block{l}.csv`: header `head,query,inst_0,...,inst_{M-1}`, one
//! row per head and query; each row is a distribution over the block-level
//! instances (images for hierarchical bags).
//!
//! `patch_weights_image{i}.csv`: header `patch,alpha`, one row per patch of
//! image `i`. Written for hierarchical bags only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Eval;
use crate::mivpg::{mivpg_forward, Bag, MivpgConfig, MivpgParams};
use crate::tensor::Tensor;

pub fn cross_attention_csv(heads: &[Tensor]) -> String {
    let m = heads.first().map_or(0, Tensor::cols);
    let mut out = String::from("head,query");
    for j in 0..m {
        write!(out, ",inst_{j}").unwrap();
    }
    out.push('\n');
    for (h, map) in heads.iter().enumerate() {
        for q in 0..map.rows() {
            write!(out, "{h},{q}").unwrap();
            for w in map.row(q) {
                write!(out, ",{w}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn patch_weights_csv(alpha: &Tensor) -> String {
    let mut out = String::from("patch,alpha\n");
    for (i, a) in alpha.data().iter().enumerate() {
        writeln!(out, "{i},{a}").unwrap();
    }
    out
}

/// Runs the model on `bag` and writes its attention maps into `out_dir`,
/// returning the written paths in order.
pub fn export_attention(
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<Tensor>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let fwd = mivpg_forward(&mut Eval, bag, config, params)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    for block in &fwd.diagnostics.cross_attention {
        write(
            format!("cross_attn_block{}.csv", block.block),
            cross_attention_csv(&block.heads),
        )?;
    }
    if let Bag::Hierarchical(_) = bag {
        for (i, alpha) in fwd.diagnostics.patch_weights.iter().enumerate() {
            write(format!("patch_weights_image{i}.csv"), patch_weights_csv(alpha))?;
        }
    }
    Ok(files)
}

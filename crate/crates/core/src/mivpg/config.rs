use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mil::{PoolingKind, DEFAULT_ATTENTION_HIDDEN};

/// Which queries the correlated self-attention uses as keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CsaSource {
    /// Queries entering the block, `q^(l-1)`.
    #[default]
    Previous,
    /// Queries after the block's own self-attention sublayer.
    Current,
}

fn default_blocks() -> usize {
    12
}
fn default_queries() -> usize {
    32
}
fn default_every() -> usize {
    2
}
fn default_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}
fn default_hidden() -> usize {
    DEFAULT_ATTENTION_HIDDEN
}
fn default_pooling() -> PoolingKind {
    PoolingKind::AbMil
}

/// Architecture hyperparameters. The JSON form uses these field names
/// verbatim and rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MivpgConfig {
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    #[serde(default = "default_queries")]
    pub num_queries: usize,
    pub model_dim: usize,
    pub heads: usize,
    #[serde(default = "default_every")]
    pub cross_attn_every: usize,
    #[serde(default)]
    pub use_csa: bool,
    #[serde(default)]
    pub use_ppeg: bool,
    /// Feed-forward width; `4 * model_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    #[serde(default = "default_kernels")]
    pub ppeg_kernels: Vec<usize>,
    /// Probe rows of the standalone low-rank self-attention; `num_queries` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_rank_probe_size: Option<usize>,
    /// Instance embedding width `D_I`; `model_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_dim: Option<usize>,
    /// Hidden width `L_a` of the patch-level AB-MIL pooling.
    #[serde(default = "default_hidden")]
    pub abmil_hidden: usize,
    #[serde(default = "default_pooling")]
    pub image_pooling: PoolingKind,
    #[serde(default)]
    pub csa_source: CsaSource,
}

impl MivpgConfig {
    /// Twelve blocks and 32 queries over 768-wide embeddings.
    pub fn full_scale() -> Self {
        MivpgConfig {
            num_blocks: 12,
            num_queries: 32,
            model_dim: 768,
            heads: 12,
            ..MivpgConfig::desk()
        }
    }

    /// Small default used by tests and the CLI.
    pub fn desk() -> Self {
        MivpgConfig {
            num_blocks: 4,
            num_queries: 8,
            model_dim: 64,
            heads: 4,
            cross_attn_every: 2,
            use_csa: false,
            use_ppeg: false,
            ffn_hidden: None,
            ppeg_kernels: default_kernels(),
            low_rank_probe_size: None,
            instance_dim: None,
            abmil_hidden: DEFAULT_ATTENTION_HIDDEN,
            image_pooling: PoolingKind::AbMil,
            csa_source: CsaSource::Previous,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.model_dim)
    }

    pub fn probe_size(&self) -> usize {
        self.low_rank_probe_size.unwrap_or(self.num_queries)
    }

    pub fn instance_dim(&self) -> usize {
        self.instance_dim.unwrap_or(self.model_dim)
    }

    /// Blocks `l` with `l % cross_attn_every == 0` (0-based) carry cross-attention.
    pub fn has_cross_attention(&self, block_index: usize) -> bool {
        block_index % self.cross_attn_every == 0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("num_queries", self.num_queries),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("cross_attn_every", self.cross_attn_every),
            ("ffn_hidden", self.ffn_hidden()),
            ("low_rank_probe_size", self.probe_size()),
            ("instance_dim", self.instance_dim()),
            ("abmil_hidden", self.abmil_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if let Some(k) = self.ppeg_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("ppeg kernel size {k} is not odd")));
        }
        if self.use_ppeg && self.ppeg_kernels.is_empty() {
            return Err(Error::Config("use_ppeg needs at least one kernel size".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: MivpgConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the compact JSON form with every default resolved.
    pub fn digest(&self) -> String {
        let resolved = MivpgConfig {
            ffn_hidden: Some(self.ffn_hidden()),
            low_rank_probe_size: Some(self.probe_size()),
            instance_dim: Some(self.instance_dim()),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&resolved).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg = MivpgConfig::from_json(r#"{"model_dim": 64, "heads": 4}"#).unwrap();
        assert_eq!(cfg.num_blocks, 12);
        assert_eq!(cfg.num_queries, 32);
        assert_eq!(cfg.cross_attn_every, 2);
        assert_eq!(cfg.ffn_hidden(), 256);
        assert_eq!(cfg.ppeg_kernels, vec![3, 5, 7]);
        assert_eq!(cfg.csa_source, CsaSource::Previous);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = MivpgConfig::from_json(r#"{"model_dim": 64, "heads": 4, "use_cs": true}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("use_cs")), "{err}");
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(MivpgConfig::from_json(r#"{"model_dim": 10, "heads": 4}"#).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(MivpgConfig::from_json(r#"{"model_dim": 8, "heads": 2, "ppeg_kernels": [3, 4]}"#)
            .is_err());
    }

    #[test]
    fn json_round_trip_and_digest() {
        let mut cfg = MivpgConfig::desk();
        cfg.use_csa = true;
        let back = MivpgConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        // Explicit defaults hash the same as implicit ones.
        let explicit = MivpgConfig {
            ffn_hidden: Some(256),
            ..cfg.clone()
        };
        assert_eq!(explicit.digest(), cfg.digest());
        assert_ne!(MivpgConfig::desk().digest(), cfg.digest());
    }

    #[test]
    fn cross_attention_schedule() {
        let cfg = MivpgConfig::desk();
        let with: Vec<bool> = (0..4).map(|l| cfg.has_cross_attention(l)).collect();
        assert_eq!(with, [true, false, true, false]);
    }
}

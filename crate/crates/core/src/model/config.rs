use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// Residual + LayerNorm after each sublayer, ReLU feed-forward.
    PostlnSasrec,
    /// Pre-norm sublayers whose residual branch is scaled by a sigmoid gate
    /// of the block input; SwiGLU feed-forward.
    Ligr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One scalar gate per token (`W: d×1`).
    PerToken,
    /// One gate per channel (`W: d×d`).
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub emb_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    /// SwiGLU inner width multiplier (LiGR only).
    pub ff_emb_mult: usize,
    pub max_len: usize,
    pub block_style: BlockStyle,
    pub attention: AttentionMode,
    pub final_norm: bool,
    pub gate: GateMode,
    pub gate_bias: bool,
    pub layer_norm_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            emb_dim: 64,
            n_blocks: 2,
            n_heads: 2,
            dropout_rate: 0.1,
            ff_emb_mult: 4,
            max_len: 50,
            block_style: BlockStyle::Ligr,
            attention: AttentionMode::Causal,
            final_norm: true,
            gate: GateMode::PerToken,
            gate_bias: false,
            layer_norm_eps: 1e-8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.emb_dim == 0 || self.n_heads == 0 || !self.emb_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "emb_dim {} must be a positive multiple of n_heads {}",
                self.emb_dim, self.n_heads
            ));
        }
        if self.max_len < 1 {
            return bad("max_len must be >= 1".into());
        }
        if self.ff_emb_mult < 1 {
            return bad("ff_emb_mult must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.n_heads
    }
}

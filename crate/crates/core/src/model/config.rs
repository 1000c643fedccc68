use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gal::GalConstants;
use crate::taskforge::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub gal_rank: usize,
    pub n_routed: usize,
    pub top_e: usize,
    pub l_moge_fraction: f64,
    pub graph_dim: usize,
    pub graph_tokens: usize,
    pub norm_eps: f64,
    pub gal: GalConstants,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            vocab_size: Tokenizer::standard().len(),
            max_seq: 96,
            gal_rank: 8,
            n_routed: 2,
            top_e: 2,
            l_moge_fraction: 0.25,
            graph_dim: 32,
            graph_tokens: 4,
            norm_eps: 1e-6,
            gal: GalConstants::default(),
        }
    }
}

impl ModelConfig {
    /// Alternate routing preset with four routed experts.
    pub fn four_routed() -> Self {
        Self { n_routed: 4, ..Self::default() }
    }

    /// First layer (1-based) that carries a mixture block.
    pub fn l_moge(&self) -> usize {
        ((self.l_moge_fraction * self.n_layers as f64).ceil() as usize).max(1)
    }

    /// Whether 1-based layer `l` carries a mixture block.
    pub fn is_moge_layer(&self, l: usize) -> bool {
        l >= self.l_moge()
    }

    pub fn moge_layer_count(&self) -> usize {
        (1..=self.n_layers).filter(|&l| self.is_moge_layer(l)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < Tokenizer::standard().len() {
            return bad(format!(
                "vocab_size {} smaller than the tokenizer's {}",
                self.vocab_size,
                Tokenizer::standard().len()
            ));
        }
        if self.max_seq < 2 || self.graph_tokens == 0 || self.graph_dim == 0 {
            return bad("max_seq >= 2, graph_tokens >= 1 and graph_dim >= 1 required".into());
        }
        if !(self.l_moge_fraction > 0.0 && self.l_moge_fraction <= 1.0) {
            return bad(format!("l_moge_fraction {} outside (0, 1]", self.l_moge_fraction));
        }
        if self.top_e == 0 || self.top_e > self.n_routed {
            return bad(format!("need 1 <= top_e ({}) <= n_routed ({})", self.top_e, self.n_routed));
        }
        if self.gal_rank == 0 || self.gal_rank > self.d_model.min(self.d_ff) {
            return bad(format!("gal_rank {} outside 1..={}", self.gal_rank, self.d_model.min(self.d_ff)));
        }
        if self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

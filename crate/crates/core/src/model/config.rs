use serde::{Deserialize, Serialize};

use super::hooks::Site;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub layernorm_epsilon: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Two layers, byte-level vocabulary. Big enough for every text path.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_seq_len: 128,
            layernorm_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(
                "layernorm_epsilon must be a small positive number".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Default steering layer: the middle of the stack.
    pub fn default_layer(&self) -> usize {
        self.n_layers / 2
    }

    /// Default layer for `site`; the final-hidden site only exists at the top.
    pub fn default_layer_for(&self, site: Site) -> usize {
        match site {
            Site::BlockOutput => self.default_layer(),
            Site::FinalHidden => self.n_layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_short_context() {
        let cfg = ModelConfig {
            max_seq_len: 1,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }
}

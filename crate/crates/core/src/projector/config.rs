use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskRule;

fn default_queries() -> usize {
    1024
}
fn default_model_dim() -> usize {
    64
}
fn default_input_dim() -> usize {
    32
}
fn default_heads() -> usize {
    8
}
fn default_expansion() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    #[serde(default)]
    pub mask_rule: MaskRule,
    #[serde(default)]
    pub use_tpe: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            n_queries: default_queries(),
            model_dim: default_model_dim(),
            input_dim: default_input_dim(),
            n_heads: default_heads(),
            ffn_expansion: default_expansion(),
            mask_rule: MaskRule::default(),
            use_tpe: false,
            seed: 0,
        }
    }
}

impl ProjectorConfig {
    /// Small configuration used by the oracle tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            n_queries: 4,
            model_dim: 8,
            input_dim: 5,
            n_heads: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_expansion * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_queries", self.n_queries),
            ("model_dim", self.model_dim),
            ("input_dim", self.input_dim),
            ("n_heads", self.n_heads),
            ("ffn_expansion", self.ffn_expansion),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

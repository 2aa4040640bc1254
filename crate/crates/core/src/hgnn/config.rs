use serde::{Deserialize, Serialize};

use super::HgnnError;
use crate::gog::NUM_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Sum,
    Mean,
    Max,
}

/// Which edges count as a node's neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    /// Successors.
    Out,
    /// Predecessors.
    In,
    /// Union of successors and predecessors.
    Both,
}

/// One embedding level: `n_gcn` convolutions, optionally closed by an
/// attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStackConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_gcn: usize,
    pub use_gat: bool,
    /// Only consulted at the CFG level.
    pub readout: Readout,
    pub neighbor_mode: NeighborMode,
}

impl LayerStackConfig {
    pub fn depth(&self) -> usize {
        self.n_gcn + usize::from(self.use_gat)
    }

    pub fn validate(&self, level: &str) -> Result<(), HgnnError> {
        if self.n_gcn < 1 {
            return Err(HgnnError::Config(format!("{level}: n_gcn must be at least 1")));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 {
            return Err(HgnnError::Config(format!("{level}: dimensions must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cfg_stack: LayerStackConfig,
    pub gog_stack: LayerStackConfig,
}

impl ModelConfig {
    /// Three convolutions plus attention at both levels.
    pub fn with_layers(hidden_dim: usize, n_gcn: usize, use_gat: bool) -> Self {
        let stack = |input_dim| LayerStackConfig {
            input_dim,
            hidden_dim,
            n_gcn,
            use_gat,
            readout: Readout::Sum,
            neighbor_mode: NeighborMode::Both,
        };
        Self {
            cfg_stack: stack(NUM_FEATURES),
            gog_stack: stack(hidden_dim),
        }
    }

    /// CFG convolution iterations.
    pub fn cfg_iterations(&self) -> usize {
        self.cfg_stack.depth()
    }

    /// Call-graph convolution iterations.
    pub fn gog_iterations(&self) -> usize {
        self.gog_stack.depth()
    }

    pub fn embedding_dim(&self) -> usize {
        self.gog_stack.hidden_dim
    }

    pub fn validate(&self) -> Result<(), HgnnError> {
        self.cfg_stack.validate("cfg_stack")?;
        self.gog_stack.validate("gog_stack")?;
        if self.cfg_stack.input_dim != NUM_FEATURES {
            return Err(HgnnError::Config(format!(
                "cfg_stack.input_dim must be {NUM_FEATURES}, got {}",
                self.cfg_stack.input_dim
            )));
        }
        if self.cfg_stack.hidden_dim != self.gog_stack.input_dim {
            return Err(HgnnError::Config(format!(
                "cfg_stack output dim {} differs from gog_stack input dim {}",
                self.cfg_stack.hidden_dim, self.gog_stack.input_dim
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_layers(64, 3, true)
    }
}

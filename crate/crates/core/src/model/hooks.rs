//! Named activation sites and the additive mutation applied at them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Residual stream after `layer` blocks have run. Layer 0 is the
    /// embedding output, layer `n_layers` the output of the last block.
    BlockOutput,
    /// Output of the final norm, the vector fed to the unembedding.
    FinalHidden,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::BlockOutput => "block_output",
            Site::FinalHidden => "final_hidden",
        })
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_output" => Ok(Site::BlockOutput),
            "final_hidden" => Ok(Site::FinalHidden),
            other => Err(Error::InvalidArgument(format!("unknown hook site {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
}

impl HookPoint {
    pub fn block_output(layer: usize) -> Self {
        Self {
            layer,
            site: Site::BlockOutput,
        }
    }

    pub fn final_hidden(n_layers: usize) -> Self {
        Self {
            layer: n_layers,
            site: Site::FinalHidden,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer > n_layers {
            return Err(Error::InvalidArgument(format!(
                "hook layer {} exceeds n_layers {n_layers}",
                self.layer
            )));
        }
        if self.site == Site::FinalHidden && self.layer != n_layers {
            return Err(Error::InvalidArgument(format!(
                "final_hidden hook must sit at layer {n_layers}, got {}",
                self.layer
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.site, self.layer)
    }
}

/// Adds `multiplier * vector` to every position of the activation at `point`.
#[derive(Debug, Clone, Copy)]
pub struct Hook<'a> {
    pub point: HookPoint,
    pub vector: &'a [f32],
    pub multiplier: f32,
}

impl<'a> Hook<'a> {
    pub fn new(point: HookPoint, vector: &'a [f32], multiplier: f32) -> Self {
        Self {
            point,
            vector,
            multiplier,
        }
    }

    /// The exact mutation the forward pass performs on one row.
    #[inline]
    pub fn apply_row(&self, row: &mut [f32]) {
        for (x, &v) in row.iter_mut().zip(self.vector) {
            *x += self.multiplier * v;
        }
    }
}

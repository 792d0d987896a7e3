//! The searchable module: cells of relaxed edges, two sequential groups with
//! a shortcut, and desk-scale detection heads.

pub mod alpha;
pub mod cell;
pub mod net;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

pub use alpha::AlphaTable;
pub use cell::{Cell, CellTopology, Edge, EdgeOp, Group};
pub use net::{DetectionNet, ModuleOutput, CLS_PRIOR, STEM_STRIDE};

/// Number of sequential cell groups in the module.
pub const NUM_GROUPS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    /// Cells per group.
    pub m: usize,
    /// Node channel width.
    pub c: usize,
    /// Transformation block width.
    pub c_prime: usize,
    pub decouple: bool,
    /// Build blocks with representation sharing; `false` uses the
    /// unshared construction (for verification).
    pub share: bool,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            m: 1,
            c: 16,
            c_prime: 8,
            decouple: true,
            share: true,
            in_channels: 1,
            num_classes: 3,
            nodes: 3,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let positive = [
            ("m", self.m),
            ("c", self.c),
            ("c_prime", self.c_prime),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("nodes", self.nodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TensorError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

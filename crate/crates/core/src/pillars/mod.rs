//! Dynamic voxelization into pillars, point decoration, and the pillar
//! feature encoder.

mod encoder;
mod grid;
mod voxelize;

pub use encoder::{EncoderCache, PillarEncoder};
pub use grid::GridSpec;
pub use voxelize::{pillarize, Pillars, DECORATION_WIDTH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarConfig {
    /// Encoder output channels `C`.
    pub channels: usize,
    /// Global point budget `N_t` per scan.
    pub point_budget: usize,
}

impl Default for PillarConfig {
    fn default() -> Self {
        PillarConfig {
            channels: 64,
            point_budget: 200_000,
        }
    }
}

impl PillarConfig {
    pub fn decoration_width(&self) -> usize {
        DECORATION_WIDTH
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.point_budget == 0 {
            return Err(Error::Config(
                "pillar channels and point_budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

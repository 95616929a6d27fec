use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Rotary embedding settings plus the context-length to base-frequency schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
    pub length_to_base: BTreeMap<usize, f64>,
}

impl RopeConfig {
    /// Base frequencies selected for the 4K, 8K, 32K and 128K phases.
    pub fn reference_table() -> BTreeMap<usize, f64> {
        BTreeMap::from([(4096, 1e4), (8192, 1e5), (32768, 1.6e6), (131_072, 2.56e7)])
    }

    pub fn reference(head_dim: usize) -> Self {
        Self {
            base: 1e4,
            head_dim,
            length_to_base: Self::reference_table(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            bail!(
                Config,
                "rotary head_dim must be even, got {}",
                self.head_dim
            );
        }
        if !(self.base > 0.0) {
            bail!(Config, "rotary base must be positive");
        }
        let bases: Vec<f64> = self.length_to_base.values().copied().collect();
        if bases.iter().any(|b| !(*b > 0.0)) || bases.windows(2).any(|w| w[1] <= w[0]) {
            bail!(
                Config,
                "length_to_base bases must be positive and strictly increasing"
            );
        }
        Ok(())
    }

    /// Base for the shortest scheduled context that covers `len`.
    pub fn base_for_length(&self, len: usize) -> Result<f64> {
        match self.length_to_base.range(len..).next() {
            Some((_, b)) => Ok(*b),
            None => bail!(
                Argument,
                "context length {len} exceeds the longest scheduled length {:?}",
                self.length_to_base.keys().last()
            ),
        }
    }
}

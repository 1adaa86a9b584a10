use crate::channel::{effective_gains, gen_channels, gen_topology, Codebook, EffectiveGains, SimConfig};
use crate::error::Result;
use crate::graph::{build_features, GraphFeatures};
use crate::rng::RngState;

/// One network instance as seen by the schedulers: the gain tensor and the
/// graph features built from the same channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub gains: EffectiveGains,
    pub features: GraphFeatures,
}

impl Sample {
    /// topology -> channels -> (gains, features), all drawn from `rng`.
    pub fn generate(config: &SimConfig, codebook: &Codebook, rng: &mut RngState) -> Result<Self> {
        let topology = gen_topology(config, rng);
        let channels = gen_channels(&topology, config, rng);
        Ok(Self {
            gains: effective_gains(&channels, codebook)?,
            features: build_features(&channels, codebook)?,
        })
    }

    pub fn n(&self) -> usize {
        self.gains.n()
    }

    /// Relabels pairs consistently in both tensors.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            gains: self.gains.permuted(perm),
            features: self.features.permuted(perm),
        }
    }
}

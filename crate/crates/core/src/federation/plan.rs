use crate::error::{Error, Result};
use crate::numcore::AdamConfig;
use serde::{Deserialize, Serialize};

/// Server-side aggregation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggregatorKind {
    FedAvg,
    /// FedAvg plus a `(mu/2)‖w − w_global‖²` proximal term on every client.
    FedProx { mu: f64 },
    /// Control-variate drift correction (option II update).
    Scaffold,
}

impl Default for AggregatorKind {
    fn default() -> Self {
        AggregatorKind::FedProx { mu: 0.01 }
    }
}

/// Schedule of a federated training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundPlan {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub aggregator: AggregatorKind,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for RoundPlan {
    fn default() -> Self {
        Self {
            rounds: 150,
            local_epochs: 10,
            batch_size: 64,
            aggregator: AggregatorKind::default(),
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config("rounds and local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let AggregatorKind::FedProx { mu } = self.aggregator {
            if !(mu >= 0.0) {
                return Err(Error::Config(format!("FedProx mu must be non-negative, got {mu}")));
            }
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

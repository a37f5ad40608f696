use super::metrics::Normalization;
use crate::baselines::IceConfig;
use crate::datasets::{Scenario, SplitSpec, SyntheticSpec, DEFAULT_MISSING_TOKENS};
use crate::error::{Error, Result};
use crate::federation::RoundPlan;
use crate::missingness::MaskSpec;
use crate::miwae::MiwaeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Environment variable overriding the master seed.
pub const SEED_ENV: &str = "FEDIMPUTE_SEED";

/// A benchmark arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    /// Federated standardization + FedProx training.
    FedProx,
    /// Local standardization + FedProx training.
    FedProxLoc,
    FedAvg,
    Scaffold,
    /// Training on one client alone (0-based index), local standardization.
    Local(usize),
    /// Pooled training for `rounds · #clients` rounds.
    Centralized,
    /// Pooled training-client means.
    Mean,
    /// Each dataset filled with its own observed means.
    MeanLoc,
    Ice,
}

impl Arm {
    pub fn is_miwae(self) -> bool {
        matches!(self, Arm::FedProx | Arm::FedProxLoc | Arm::FedAvg | Arm::Scaffold | Arm::Local(_) | Arm::Centralized)
    }

    /// Whether every dataset is standardized by its own moments.
    pub fn local_standardization(self) -> bool {
        matches!(self, Arm::FedProxLoc | Arm::Local(_) | Arm::MeanLoc)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::FedProx => f.write_str("fedprox"),
            Arm::FedProxLoc => f.write_str("fedprox_loc"),
            Arm::FedAvg => f.write_str("fedavg"),
            Arm::Scaffold => f.write_str("scaffold"),
            Arm::Local(i) => write!(f, "local_{}", i + 1),
            Arm::Centralized => f.write_str("centralized"),
            Arm::Mean => f.write_str("mean"),
            Arm::MeanLoc => f.write_str("mean_loc"),
            Arm::Ice => f.write_str("ice"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedprox" => Arm::FedProx,
            "fedprox_loc" => Arm::FedProxLoc,
            "fedavg" => Arm::FedAvg,
            "scaffold" => Arm::Scaffold,
            "centralized" => Arm::Centralized,
            "mean" => Arm::Mean,
            "mean_loc" => Arm::MeanLoc,
            "ice" => Arm::Ice,
            other => match other.strip_prefix("local_").map(str::parse::<usize>) {
                Some(Ok(i)) if i >= 1 => Arm::Local(i - 1),
                _ => return Err(Error::Config(format!("unknown arm {other:?}"))),
            },
        })
    }
}

/// Where the data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        scenario: Scenario,
        #[serde(default)]
        synthetic: SyntheticSpec,
        #[serde(default)]
        split: SplitSpec,
    },
    /// Fixed client files plus an external test file; repetitions redraw
    /// masks and training randomness only.
    Csv {
        clients: Vec<PathBuf>,
        test: PathBuf,
        #[serde(default = "default_missing_tokens")]
        missing_tokens: Vec<String>,
    },
}

fn default_missing_tokens() -> Vec<String> {
    DEFAULT_MISSING_TOKENS.iter().map(|s| s.to_string()).collect()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { scenario: Scenario::Noniid, synthetic: SyntheticSpec::default(), split: SplitSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub normalization: Normalization,
    /// Multiple-imputation draws per row.
    pub mi_draws: usize,
    /// Latent candidates for multiple imputation; 0 means `miwae.l_test`.
    pub mi_candidates: usize,
    /// MIWAE arms whose test-set imputation spreads are reported.
    pub mi_arms: Vec<String>,
    pub save_models: bool,
    pub save_transcripts: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::Global,
            mi_draws: 30,
            mi_candidates: 0,
            mi_arms: vec!["fedprox".into()],
            save_models: true,
            save_transcripts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    /// Arm names; `local` expands to one arm per training client.
    pub arms: Vec<String>,
    /// Proximal weight used by the FedProx arms.
    pub fedprox_mu: f64,
    pub data: DataSource,
    pub mask: MaskSpec,
    pub miwae: MiwaeConfig,
    /// Schedule shared by all MIWAE arms; its aggregator is set per arm.
    pub plan: RoundPlan,
    pub ice: IceConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 5,
            output_dir: PathBuf::from("fedimpute-out"),
            arms: ["fedprox", "fedprox_loc", "local", "centralized", "mean", "ice"].iter().map(|s| s.to_string()).collect(),
            fedprox_mu: 0.01,
            data: DataSource::default(),
            mask: MaskSpec::default(),
            miwae: MiwaeConfig::default(),
            plan: RoundPlan::default(),
            ice: IceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies `FEDIMPUTE_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn n_train_clients(&self) -> usize {
        match &self.data {
            DataSource::Synthetic { scenario: Scenario::Natural, split, .. } => split.natural_sizes.len().saturating_sub(1),
            DataSource::Synthetic { scenario: Scenario::Noniid, .. } => 2,
            DataSource::Csv { clients, .. } => clients.len(),
        }
    }

    /// Arms in configuration order with `local` expanded; duplicates dropped.
    pub fn resolved_arms(&self) -> Result<Vec<Arm>> {
        let c = self.n_train_clients();
        let mut out = Vec::new();
        for name in &self.arms {
            let arms = if name == "local" { (0..c).map(Arm::Local).collect() } else { vec![name.parse()?] };
            for a in arms {
                if let Arm::Local(i) = a {
                    if i >= c {
                        return Err(Error::Config(format!("arm {a} but only {c} training clients")));
                    }
                }
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm must be configured".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(self.fedprox_mu >= 0.0) {
            return Err(Error::Config(format!("fedprox_mu must be non-negative, got {}", self.fedprox_mu)));
        }
        if self.n_train_clients() == 0 {
            return Err(Error::Config("no training clients".into()));
        }
        let arms = self.resolved_arms()?;
        for name in &self.eval.mi_arms {
            let a: Arm = name.parse()?;
            if !a.is_miwae() {
                return Err(Error::Config(format!("mi_arms entry {a} is not a MIWAE arm")));
            }
        }
        if arms.iter().any(|a| a.is_miwae()) {
            self.miwae.clone().with_features(self.miwae.n_features.max(1)).validate()?;
            self.plan.validate()?;
        }
        if arms.contains(&Arm::Ice) {
            self.ice.validate()?;
        }
        self.mask.validate()?;
        if let DataSource::Synthetic { synthetic, .. } = &self.data {
            synthetic.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the configuration. The
    /// output directory is left out: where results land is not provenance.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() })?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

use crate::error::{Error, Result};
use crate::numcore::{ObsDensity, Activation};
use crate::scalar::{student_t_log_norm, Real};
use serde::{Deserialize, Serialize};

/// Observation model of the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    Gaussian,
    /// Student-t with fixed degrees of freedom.
    StudentT { df: f64 },
}

impl Likelihood {
    pub(crate) fn density<T: Real>(&self) -> ObsDensity<T> {
        match *self {
            Likelihood::Gaussian => ObsDensity::Gaussian,
            Likelihood::StudentT { df } => {
                ObsDensity::StudentT { df: T::lit(df), log_norm: T::lit(student_t_log_norm(df)) }
            }
        }
    }
}

/// Architecture and sampling sizes of a MIWAE model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiwaeConfig {
    /// Data dimension; 0 means "take it from the data".
    pub n_features: usize,
    pub latent_dim: usize,
    pub hidden_units: usize,
    /// Importance samples per row in the training bound.
    pub k_train: usize,
    /// Importance samples per row at imputation time.
    pub l_test: usize,
    pub likelihood: Likelihood,
    pub activation: Activation,
    /// Lower bound added to every softplus-mapped scale.
    pub scale_floor: f64,
}

impl Default for MiwaeConfig {
    fn default() -> Self {
        Self {
            n_features: 0,
            latent_dim: 20,
            hidden_units: 256,
            k_train: 50,
            l_test: 10_000,
            likelihood: Likelihood::Gaussian,
            activation: Activation::Tanh,
            scale_floor: 1e-3,
        }
    }
}

impl MiwaeConfig {
    pub fn with_features(mut self, p: usize) -> Self {
        self.n_features = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("miwae: {what}")));
        if self.n_features == 0 {
            return bad("n_features must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.hidden_units == 0 {
            return bad("hidden_units must be at least 1");
        }
        if self.k_train == 0 || self.l_test == 0 {
            return bad("k_train and l_test must be at least 1");
        }
        if !(self.scale_floor > 0.0) {
            return bad("scale_floor must be positive");
        }
        if let Likelihood::StudentT { df } = self.likelihood {
            if !(df > 0.0) {
                return bad("Student-t degrees of freedom must be positive");
            }
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        [self.n_features, self.hidden_units, self.hidden_units, 2 * self.latent_dim]
    }

    pub fn decoder_widths(&self) -> [usize; 4] {
        [self.latent_dim, self.hidden_units, self.hidden_units, 2 * self.n_features]
    }
}

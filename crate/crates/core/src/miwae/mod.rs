//! Missing-data importance-weighted autoencoder: an encoder on zero-filled
//! standardized rows, a factorized decoder, the K-sample observed-data bound
//! and importance-sampling imputation.

mod bound;
mod config;
mod impute;
mod io;
mod model;

pub use bound::{draw_noise, miwae_bound, miwae_bound_grad, miwae_bound_grad_with_noise, miwae_bound_with_noise};
pub use config::{Likelihood, MiwaeConfig};
pub use impute::{impute_dataset, impute_multiple, impute_single, prior_predictive, ImputationDraws};
pub use io::{load_model, read_model, save_model, write_model};
pub use model::{miwae_layout, MiwaeModel};

#[cfg(test)]
mod tests;

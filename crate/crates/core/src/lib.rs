pub mod baselines;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod federation;
pub mod fedstd;
pub mod masked;
pub mod missingness;
pub mod miwae;
pub mod numcore;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the generic core types.
pub type Matrix = numcore::Matrix<f64>;
pub type ParamVector = numcore::ParamVector<f64>;
pub type MaskedMatrix = masked::MaskedMatrix<f64>;
pub type MiwaeModel = miwae::MiwaeModel<f64>;
pub type GlobalScaler = fedstd::GlobalScaler<f64>;

/// Single-precision variants.
pub type Matrix32 = numcore::Matrix<f32>;
pub type ParamVector32 = numcore::ParamVector<f32>;
pub type MaskedMatrix32 = masked::MaskedMatrix<f32>;
pub type MiwaeModel32 = miwae::MiwaeModel<f32>;
pub type GlobalScaler32 = fedstd::GlobalScaler<f32>;

//! One-round federated standardization under missingness.
//!
//! Each client uploads per-feature sufficient statistics of its observed
//! entries; the server pools them into an exact global mean and population
//! standard deviation and broadcasts the result.

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::numcore::Matrix;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Lower bound on every broadcast standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per-feature (count, sum, sum of squares) over observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MomentSummary<T> {
    pub count: Vec<u64>,
    pub sum: Vec<T>,
    pub sum_sq: Vec<T>,
}

impl<T: Real> MomentSummary<T> {
    pub fn n_features(&self) -> usize {
        self.count.len()
    }
}

/// Global per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GlobalScaler<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub n: Vec<u64>,
}

impl<T: Real> GlobalScaler<T> {
    pub fn identity(p: usize) -> Self {
        Self { mu: vec![T::zero(); p], sigma: vec![T::one(); p], n: vec![0; p] }
    }

    pub fn n_features(&self) -> usize {
        self.mu.len()
    }

    /// Maps standardized values back to the original units.
    pub fn invert(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        if z.cols() != self.mu.len() {
            return Err(Error::Dimension(format!("{} columns vs scaler of {}", z.cols(), self.mu.len())));
        }
        Ok(Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) * self.sigma[j] + self.mu[j]))
    }
}

/// Sufficient statistics of the observed entries of `data`.
pub fn local_moments<T: Real>(data: &MaskedMatrix<T>) -> Result<MomentSummary<T>> {
    let p = data.cols();
    let mut s = MomentSummary { count: vec![0; p], sum: vec![T::zero(); p], sum_sq: vec![T::zero(); p] };
    for i in 0..data.rows() {
        let row = data.values().row(i);
        let obs = data.mask().row(i);
        for j in 0..p {
            if obs[j] {
                let x = row[j];
                if !x.is_finite() {
                    return Err(Error::Data(format!("non-finite observed value at row {i}, column {j}")));
                }
                s.count[j] += 1;
                s.sum[j] += x;
                s.sum_sq[j] += x * x;
            }
        }
    }
    Ok(s)
}

/// Pools client summaries into the global scaler.
pub fn aggregate_moments<T: Real>(summaries: &[MomentSummary<T>]) -> Result<GlobalScaler<T>> {
    let first = summaries.first().ok_or_else(|| Error::Usage("no moment summaries to aggregate".into()))?;
    let p = first.n_features();
    for (c, s) in summaries.iter().enumerate() {
        if s.n_features() != p || s.sum.len() != p || s.sum_sq.len() != p {
            return Err(Error::Dimension(format!("summary {c} has {} features, expected {p}", s.n_features())));
        }
    }
    let floor = T::lit(SIGMA_FLOOR);
    let mut out = GlobalScaler { mu: vec![T::zero(); p], sigma: vec![T::one(); p], n: vec![0; p] };
    for j in 0..p {
        let n: u64 = summaries.iter().map(|s| s.count[j]).sum();
        let sum: T = summaries.iter().map(|s| s.sum[j]).sum();
        let sum_sq: T = summaries.iter().map(|s| s.sum_sq[j]).sum();
        out.n[j] = n;
        if n == 0 {
            continue;
        }
        let nf = T::from_u64(n).unwrap();
        let mu = sum / nf;
        out.mu[j] = mu;
        if n > 1 {
            let var = sum_sq / nf - mu * mu;
            out.sigma[j] = var.max(floor * floor).sqrt();
        }
    }
    Ok(out)
}

/// Standardizes observed entries; the mask is left untouched.
pub fn apply_scaler<T: Real>(data: &MaskedMatrix<T>, scaler: &GlobalScaler<T>) -> Result<MaskedMatrix<T>> {
    if data.cols() != scaler.n_features() {
        return Err(Error::Dimension(format!(
            "data has {} columns, scaler {}",
            data.cols(),
            scaler.n_features()
        )));
    }
    let v = data.values();
    let out = Matrix::from_fn(v.rows(), v.cols(), |i, j| (v.get(i, j) - scaler.mu[j]) / scaler.sigma[j]);
    MaskedMatrix::new(out, data.mask().clone())
}

/// Scaler fit on a single dataset, as a client standardizing alone would.
pub fn local_scaler<T: Real>(data: &MaskedMatrix<T>) -> Result<GlobalScaler<T>> {
    aggregate_moments(&[local_moments(data)?])
}

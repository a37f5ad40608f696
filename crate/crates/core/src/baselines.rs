//! Reference imputers: per-feature mean and iterative chained equations with
//! ridge regressors. Both are deterministic.

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::numcore::Matrix;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Per-feature means of the observed training entries; 0 where a feature has
/// no observed entry.
pub fn feature_means(train: &MaskedMatrix<f64>) -> Vec<f64> {
    let (n, p) = (train.rows(), train.cols());
    let mut sum = vec![0.0; p];
    let mut count = vec![0usize; p];
    for i in 0..n {
        for j in 0..p {
            if let Some(v) = train.get(i, j) {
                sum[j] += v;
                count[j] += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

fn fill(target: &MaskedMatrix<f64>, values: &[f64]) -> Matrix<f64> {
    let mut out = target.values().clone();
    for i in 0..target.rows() {
        for j in 0..target.cols() {
            if !target.mask().is_observed(i, j) {
                out.set(i, j, values[j]);
            }
        }
    }
    out
}

fn same_width(train: &MaskedMatrix<f64>, target: &MaskedMatrix<f64>) -> Result<()> {
    if train.cols() != target.cols() {
        return Err(Error::Dimension(format!("train has {} columns, target {}", train.cols(), target.cols())));
    }
    Ok(())
}

/// Fills every missing target cell with the training mean of its feature.
pub fn mean_fit_impute(train: &MaskedMatrix<f64>, target: &MaskedMatrix<f64>) -> Result<Matrix<f64>> {
    same_width(train, target)?;
    Ok(fill(target, &feature_means(train)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IceConfig {
    pub lambda: f64,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for IceConfig {
    fn default() -> Self {
        Self { lambda: 1.0, max_sweeps: 10, tol: 1e-3 }
    }
}

impl IceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.max_sweeps == 0 || !(self.tol >= 0.0) {
            return Err(Error::Config(format!("ICE needs lambda > 0 and max_sweeps >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// One ridge regression of feature `j` on all other features.
#[derive(Clone, Debug)]
struct Regressor {
    j: usize,
    intercept: f64,
    /// Coefficients over the other features in ascending order.
    beta: Vec<f64>,
}

impl Regressor {
    fn predict(&self, row: &[f64]) -> f64 {
        let others = row.iter().enumerate().filter(|&(k, _)| k != self.j).map(|(_, v)| v);
        self.intercept + others.zip(&self.beta).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// A fitted ICE imputer: training means plus the regressors of every sweep.
#[derive(Clone, Debug)]
pub struct IceImputer {
    means: Vec<f64>,
    sweeps: Vec<Vec<Regressor>>,
}

impl IceImputer {
    pub fn sweeps(&self) -> usize {
        self.sweeps.len()
    }

    /// Mean-initializes `target` and replays every fitted sweep on it.
    pub fn transform(&self, target: &MaskedMatrix<f64>) -> Result<Matrix<f64>> {
        if target.cols() != self.means.len() {
            return Err(Error::Dimension(format!("target has {} columns, imputer {}", target.cols(), self.means.len())));
        }
        let mut x = fill(target, &self.means);
        let mask = target.mask();
        for sweep in &self.sweeps {
            for reg in sweep {
                for i in 0..x.rows() {
                    if !mask.is_observed(i, reg.j) {
                        let v = reg.predict(x.row(i));
                        x.set(i, reg.j, v);
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::Numeric("ICE produced non-finite imputations".into()));
        }
        Ok(x)
    }
}

fn ridge(x: &Matrix<f64>, rows: &[usize], j: usize, lambda: f64) -> Result<Regressor> {
    let p = x.cols();
    let n = rows.len();
    let mut z = Matrix::zeros(n, p - 1);
    let mut y = vec![0.0; n];
    for (r, &i) in rows.iter().enumerate() {
        let src = x.row(i);
        y[r] = src[j];
        let dst = z.row_mut(r);
        dst[..j].copy_from_slice(&src[..j]);
        dst[j..].copy_from_slice(&src[j + 1..]);
    }
    let nf = n.max(1) as f64;
    let zbar: Vec<f64> = (0..p - 1).map(|k| (0..n).map(|r| z.get(r, k)).sum::<f64>() / nf).collect();
    let ybar = y.iter().sum::<f64>() / nf;
    for r in 0..n {
        z.row_mut(r).iter_mut().zip(&zbar).for_each(|(v, m)| *v -= m);
        y[r] -= ybar;
    }
    let gram = z.matmul_tn(&z)?;
    let yv = Matrix::from_vec(n, 1, y)?;
    let rhs = z.matmul_tn(&yv)?;
    let mut a = DMatrix::from_row_slice(p - 1, p - 1, gram.as_slice());
    for k in 0..p - 1 {
        a[(k, k)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| Error::Numeric(format!("ridge system for feature {j} is not positive definite")))?;
    let beta = chol.solve(&DVector::from_column_slice(rhs.as_slice()));
    let intercept = ybar - beta.iter().zip(&zbar).map(|(b, m)| b * m).sum::<f64>();
    Ok(Regressor { j, intercept, beta: beta.iter().copied().collect() })
}

/// Fits ICE on `train`: mean start, then ascending-order sweeps until the
/// largest change in an imputed cell falls below `tol` or `max_sweeps` runs.
pub fn ice_fit(train: &MaskedMatrix<f64>, cfg: &IceConfig) -> Result<IceImputer> {
    cfg.validate()?;
    let (n, p) = (train.rows(), train.cols());
    let means = feature_means(train);
    let mut x = fill(train, &means);
    let mut sweeps = Vec::new();
    let mask = train.mask();
    let has_missing: Vec<bool> = (0..p).map(|j| (0..n).any(|i| !mask.is_observed(i, j))).collect();
    if p < 2 || !has_missing.iter().any(|&m| m) {
        return Ok(IceImputer { means, sweeps });
    }
    for _ in 0..cfg.max_sweeps {
        let mut sweep = Vec::new();
        let mut change = 0.0f64;
        for j in (0..p).filter(|&j| has_missing[j]) {
            let obs: Vec<usize> = (0..n).filter(|&i| mask.is_observed(i, j)).collect();
            if obs.is_empty() {
                continue;
            }
            let reg = ridge(&x, &obs, j, cfg.lambda)?;
            for i in (0..n).filter(|&i| !mask.is_observed(i, j)) {
                let v = reg.predict(x.row(i));
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("ICE prediction for feature {j} is not finite")));
                }
                change = change.max((v - x.get(i, j)).abs());
                x.set(i, j, v);
            }
            sweep.push(reg);
        }
        sweeps.push(sweep);
        if change < cfg.tol {
            break;
        }
    }
    Ok(IceImputer { means, sweeps })
}

/// Fits ICE on `train` and imputes `target`.
pub fn ice_fit_impute(train: &MaskedMatrix<f64>, target: &MaskedMatrix<f64>, cfg: &IceConfig) -> Result<Matrix<f64>> {
    same_width(train, target)?;
    ice_fit(train, cfg)?.transform(target)
}

//! Mask simulation: MCAR, MAR on a fully observed pivot subset, and MNAR
//! (self-censoring, generation only).
//!
//! MAR and MNAR use a logistic score per maskable feature whose intercept is
//! calibrated by bisection so the expected missing rate over the supplied
//! rows matches `rate`. Pivot columns are standardized before scoring and the
//! weights are scaled by `1/sqrt(#pivots)` so the score has roughly unit
//! spread regardless of width.

use crate::error::{Error, Result};
use crate::masked::Mask;
use crate::numcore::Matrix;
use crate::rng::stream;
use crate::scalar::sigmoid;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

const MAX_BISECTIONS: usize = 200;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    #[default]
    Mar,
    Mnar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub mechanism: Mechanism,
    /// Target missing rate (on maskable features for MAR/MNAR).
    pub rate: f64,
    /// Share of columns kept fully observed as MAR covariates.
    pub pivot_fraction: f64,
    /// Seeds the pivot choice and the logistic weights.
    pub seed: u64,
    /// Allowed gap between calibrated expected rate and `rate`.
    pub tolerance: f64,
    /// Multiplies the N(0,1) pivot weights; 0 turns MAR into MCAR.
    pub weight_scale: f64,
    /// Weight of a feature's own standardized value in its MNAR score.
    pub self_weight: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Mar,
            rate: 0.3,
            pivot_fraction: 0.3,
            seed: 0,
            tolerance: 1e-3,
            weight_scale: 1.0,
            self_weight: 2.0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("mask rate must lie in (0,1), got {}", self.rate)));
        }
        if self.mechanism != Mechanism::Mcar && !(self.pivot_fraction > 0.0 && self.pivot_fraction < 1.0) {
            return Err(Error::Config(format!("pivot_fraction must lie in (0,1), got {}", self.pivot_fraction)));
        }
        if !(self.tolerance > 0.0) || !self.weight_scale.is_finite() || !self.self_weight.is_finite() {
            return Err(Error::Config("mask tolerance must be positive and weights finite".into()));
        }
        Ok(())
    }

    /// Number of always-observed columns for a table of width `p`.
    pub fn pivot_count(&self, p: usize) -> usize {
        ((self.pivot_fraction * p as f64).ceil() as usize).clamp(1, p.saturating_sub(1).max(1))
    }
}

/// The logistic design behind a MAR/MNAR mask, exposed for diagnostics.
#[derive(Clone, Debug)]
pub struct LogisticDesign {
    /// Pivot column indices, ascending.
    pub pivots: Vec<usize>,
    /// Maskable column indices, ascending.
    pub maskable: Vec<usize>,
    /// `weights[k][l]`: weight of pivot `l` in the score of `maskable[k]`.
    pub weights: Vec<Vec<f64>>,
    /// Calibrated intercepts, one per maskable column.
    pub intercepts: Vec<f64>,
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("mask rate must lie in (0,1), got {rate}")))
    }
}

/// I.i.d. Bernoulli(`rate`) missingness; rows left fully missing are redrawn.
pub fn mcar_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<Mask> {
    check_rate(rate)?;
    if cols == 0 {
        return Ok(Mask::all_observed(rows, 0));
    }
    let mut mask = Mask::all_observed(rows, cols);
    for i in 0..rows {
        let row = mask.row_mut(i);
        loop {
            for c in row.iter_mut() {
                *c = !rng.gen_bool(rate);
            }
            if row.iter().any(|&o| o) {
                break;
            }
        }
    }
    Ok(mask)
}

fn column_standardized(data: &Matrix<f64>, j: usize) -> Vec<f64> {
    let col = data.column(j);
    let n = col.len().max(1) as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    col.iter().map(|x| (x - mean) / sd).collect()
}

/// Intercept `b` with `mean_i sigmoid(score_i + b)` within `tol` of `rate`.
pub fn calibrate_intercept(scores: &[f64], rate: f64, tol: f64) -> Result<f64> {
    check_rate(rate)?;
    let expected = |b: f64| scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len().max(1) as f64;
    let spread = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let logit = (rate / (1.0 - rate)).ln();
    let (mut lo, mut hi) = (logit - spread - 1.0, logit + spread + 1.0);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = expected(mid);
        if (r - rate).abs() <= tol {
            return Ok(mid);
        }
        if r < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!("intercept for rate {rate} not found within {MAX_BISECTIONS} bisections")))
}

/// Builds the pivot split, weights and calibrated intercepts for `data`.
pub fn logistic_design(data: &Matrix<f64>, spec: &MaskSpec) -> Result<LogisticDesign> {
    spec.validate()?;
    let (n, p) = data.shape();
    if p < 2 {
        return Err(Error::Config(format!("MAR/MNAR masks need at least 2 columns, got {p}")));
    }
    if !data.is_finite() {
        return Err(Error::Data("mask simulation needs complete, finite data".into()));
    }
    let q = spec.pivot_count(p);
    let mut wrng = stream(spec.seed, &[0]);
    let mut pivots = sample(&mut wrng, p, q).into_vec();
    pivots.sort_unstable();
    let maskable: Vec<usize> = (0..p).filter(|j| pivots.binary_search(j).is_err()).collect();
    let scale = spec.weight_scale / (q as f64).sqrt();
    let weights: Vec<Vec<f64>> = maskable
        .iter()
        .map(|_| (0..q).map(|_| scale * wrng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let piv_std: Vec<Vec<f64>> = pivots.iter().map(|&j| column_standardized(data, j)).collect();
    let mut intercepts = Vec::with_capacity(maskable.len());
    for (k, &j) in maskable.iter().enumerate() {
        let own = (spec.mechanism == Mechanism::Mnar && spec.self_weight != 0.0).then(|| column_standardized(data, j));
        let scores: Vec<f64> = (0..n).map(|i| score(&weights[k], &piv_std, own.as_deref(), spec.self_weight, i)).collect();
        intercepts.push(calibrate_intercept(&scores, spec.rate, spec.tolerance)?);
    }
    Ok(LogisticDesign { pivots, maskable, weights, intercepts })
}

fn score(w: &[f64], piv: &[Vec<f64>], own: Option<&[f64]>, self_weight: f64, i: usize) -> f64 {
    let s: f64 = w.iter().zip(piv).map(|(w, col)| w * col[i]).sum();
    match own {
        Some(o) => s + self_weight * o[i],
        None => s,
    }
}

fn logistic_mask<R: Rng>(data: &Matrix<f64>, spec: &MaskSpec, rng: &mut R) -> Result<(Mask, LogisticDesign)> {
    let design = logistic_design(data, spec)?;
    let (n, p) = data.shape();
    let piv_std: Vec<Vec<f64>> = design.pivots.iter().map(|&j| column_standardized(data, j)).collect();
    let mut mask = Mask::all_observed(n, p);
    for (k, &j) in design.maskable.iter().enumerate() {
        let own = (spec.mechanism == Mechanism::Mnar && spec.self_weight != 0.0).then(|| column_standardized(data, j));
        for i in 0..n {
            let pr = sigmoid(score(&design.weights[k], &piv_std, own.as_deref(), spec.self_weight, i) + design.intercepts[k]);
            if rng.gen_bool(pr.clamp(0.0, 1.0)) {
                mask.set(i, j, false);
            }
        }
    }
    Ok((mask, design))
}

/// MAR mask: pivots always observed, logistic missingness on the rest driven
/// by the standardized pivot values.
pub fn mar_mask<R: Rng>(data: &Matrix<f64>, spec: &MaskSpec, rng: &mut R) -> Result<Mask> {
    let spec = MaskSpec { mechanism: Mechanism::Mar, ..spec.clone() };
    logistic_mask(data, &spec, rng).map(|(m, _)| m)
}

/// MNAR mask: as [`mar_mask`] with the feature's own value added to its score.
pub fn mnar_mask<R: Rng>(data: &Matrix<f64>, spec: &MaskSpec, rng: &mut R) -> Result<Mask> {
    let spec = MaskSpec { mechanism: Mechanism::Mnar, ..spec.clone() };
    logistic_mask(data, &spec, rng).map(|(m, _)| m)
}

/// Dispatches on `spec.mechanism`.
pub fn simulate_mask<R: Rng>(data: &Matrix<f64>, spec: &MaskSpec, rng: &mut R) -> Result<Mask> {
    spec.validate()?;
    match spec.mechanism {
        Mechanism::Mcar => mcar_mask(data.rows(), data.cols(), spec.rate, rng),
        Mechanism::Mar => mar_mask(data, spec, rng),
        Mechanism::Mnar => mnar_mask(data, spec, rng),
    }
}

/// Fraction of missing cells restricted to `cols`.
pub fn missing_rate_on(mask: &Mask, cols: &[usize]) -> f64 {
    let total = mask.rows() * cols.len();
    if total == 0 {
        return 0.0;
    }
    let missing: usize = (0..mask.rows()).map(|i| cols.iter().filter(|&&j| !mask.is_observed(i, j)).count()).sum();
    missing as f64 / total as f64
}

/// Writes a mask as CSV of `1` (observed) / `0` (missing) under `header`.
pub fn write_mask_csv<W: Write>(mask: &Mask, header: &[String], w: W) -> Result<()> {
    if header.len() != mask.cols() {
        return Err(Error::Dimension(format!("{} header names for {} mask columns", header.len(), mask.cols())));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for i in 0..mask.rows() {
        out.write_record(mask.row(i).iter().map(|&o| if o { "1" } else { "0" }))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a mask written by [`write_mask_csv`].
pub fn read_mask_csv<R: Read>(r: R) -> Result<Mask> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let cols = rdr.headers()?.len();
    let mut cells = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Ingestion { row: i + 1, col: rec.len(), msg: format!("expected {cols} fields") });
        }
        for (j, f) in rec.iter().enumerate() {
            cells.push(match f.trim() {
                "1" => true,
                "0" => false,
                other => return Err(Error::Ingestion { row: i + 1, col: j, msg: format!("mask cell {other:?} is not 0/1") }),
            });
        }
        rows += 1;
    }
    Mask::from_vec(rows, cols, cells)
}

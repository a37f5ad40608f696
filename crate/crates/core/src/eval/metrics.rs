use crate::error::{Error, Result};
use crate::masked::Mask;
use crate::numcore::Matrix;
use serde::{Deserialize, Serialize};

/// How squared errors on scored cells are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Mean squared error over all scored cells divided by the population
    /// variance of the true values on those cells.
    #[default]
    Global,
    /// Per-feature ratio as above, averaged over features with scored cells.
    PerFeature,
    /// Plain mean squared error.
    None,
}

fn check(imputed: &Matrix<f64>, truth: &Matrix<f64>, scored: &Mask) -> Result<()> {
    if imputed.shape() != truth.shape() || truth.shape() != scored.shape() {
        return Err(Error::Dimension(format!(
            "imputed {:?}, truth {:?}, mask {:?}",
            imputed.shape(),
            truth.shape(),
            scored.shape()
        )));
    }
    Ok(())
}

fn ratio(pairs: &[(f64, f64)], slice: &str) -> Result<f64> {
    let n = pairs.len() as f64;
    let mse = pairs.iter().map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / n;
    let mean = pairs.iter().map(|(_, t)| t).sum::<f64>() / n;
    let var = pairs.iter().map(|(_, t)| (t - mean) * (t - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Evaluation(format!("true values on {slice} have zero variance")));
    }
    Ok(mse / var)
}

/// Scores the cells that `scored` marks missing (`false`), i.e. the cells
/// hidden by mask simulation. Observed cells are never read.
pub fn normalized_mse(imputed: &Matrix<f64>, truth: &Matrix<f64>, scored: &Mask, how: Normalization) -> Result<f64> {
    check(imputed, truth, scored)?;
    let (n, p) = truth.shape();
    let cells = |j: usize| (0..n).filter(move |&i| !scored.is_observed(i, j));
    match how {
        Normalization::Global | Normalization::None => {
            let pairs: Vec<(f64, f64)> = (0..p).flat_map(|j| cells(j).map(move |i| (i, j))).map(|(i, j)| (imputed.get(i, j), truth.get(i, j))).collect();
            if pairs.is_empty() {
                return Err(Error::Evaluation("no masked cells to score".into()));
            }
            if how == Normalization::None {
                return Ok(pairs.iter().map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / pairs.len() as f64);
            }
            ratio(&pairs, "the masked cells")
        }
        Normalization::PerFeature => {
            let mut scores = Vec::new();
            for j in 0..p {
                let pairs: Vec<(f64, f64)> = cells(j).map(|i| (imputed.get(i, j), truth.get(i, j))).collect();
                if !pairs.is_empty() {
                    scores.push(ratio(&pairs, &format!("feature {j}"))?);
                }
            }
            if scores.is_empty() {
                return Err(Error::Evaluation("no masked cells to score".into()));
            }
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}

/// Cells to score: hidden by simulation but present in the source data.
pub fn scoring_mask(simulated: &Mask, source: &Mask) -> Result<Mask> {
    if simulated.shape() != source.shape() {
        return Err(Error::Dimension("simulated and source masks differ in shape".into()));
    }
    let (n, p) = simulated.shape();
    let cells = (0..n * p).map(|k| simulated.as_slice()[k] || !source.as_slice()[k]).collect();
    Mask::from_vec(n, p, cells)
}

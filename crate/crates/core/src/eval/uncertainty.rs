use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::miwae::{impute_multiple, prior_predictive, MiwaeModel};
use crate::rng::stream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Spread of multiple imputations for one feature, medians over its
/// missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpread {
    pub feature: usize,
    pub cells: usize,
    pub posterior_std: f64,
    pub prior_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTable {
    pub draws: usize,
    pub per_feature: Vec<FeatureSpread>,
    /// Median over features of the per-feature posterior spread.
    pub median_posterior_std: f64,
    pub median_prior_std: f64,
    /// Observed cells identical across every draw of every row.
    pub observed_constant: bool,
    /// `draws == 1`: spreads are 0 by convention.
    pub degenerate: bool,
}

fn std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    (xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Median; 0 for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

struct RowSpread {
    cells: Vec<(usize, f64, f64)>,
    observed_constant: bool,
}

/// For every missing cell of `data`: the std of `m` posterior draws (SIR with
/// `l` latent candidates) next to the std of `m` prior-predictive draws.
/// Row `i` uses the random stream `(seed, i)`.
pub fn mi_uncertainty(model: &MiwaeModel<f64>, data: &MaskedMatrix<f64>, l: usize, m: usize, seed: u64) -> Result<UncertaintyTable> {
    if m == 0 {
        return Err(Error::Usage("multiple imputation needs m >= 1".into()));
    }
    let p = data.cols();
    let rows: Vec<RowSpread> = (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let observed = data.mask().row(i);
            let row = data.values().row(i);
            if observed.iter().all(|&o| o) {
                return Ok(RowSpread { cells: Vec::new(), observed_constant: true });
            }
            let mut rng = stream(seed, &[i as u64]);
            let draws = impute_multiple(model, row, observed, l, m, &mut rng)?;
            let prior = prior_predictive(model, m, &mut rng)?;
            let c = &draws.completions;
            let observed_constant = (0..m).all(|k| (0..p).all(|j| !observed[j] || c.get(k, j) == row[j]));
            let cells = (0..p)
                .filter(|&j| !observed[j])
                .map(|j| (j, std((0..m).map(|k| c.get(k, j))), std((0..m).map(|k| prior.get(k, j)))))
                .collect();
            Ok(RowSpread { cells, observed_constant })
        })
        .collect::<Result<_>>()?;

    let mut post: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut prior: Vec<Vec<f64>> = vec![Vec::new(); p];
    for r in &rows {
        for &(j, a, b) in &r.cells {
            post[j].push(a);
            prior[j].push(b);
        }
    }
    let per_feature: Vec<FeatureSpread> = (0..p)
        .filter(|&j| !post[j].is_empty())
        .map(|j| FeatureSpread { feature: j, cells: post[j].len(), posterior_std: median(&post[j]), prior_std: median(&prior[j]) })
        .collect();
    let mp: Vec<f64> = per_feature.iter().map(|f| f.posterior_std).collect();
    let mq: Vec<f64> = per_feature.iter().map(|f| f.prior_std).collect();
    Ok(UncertaintyTable {
        draws: m,
        median_posterior_std: median(&mp),
        median_prior_std: median(&mq),
        observed_constant: rows.iter().all(|r| r.observed_constant),
        degenerate: m == 1,
        per_feature,
    })
}

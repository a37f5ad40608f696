//! Single and multiple imputation from a trained model.

use super::bound::draw_noise;
use super::config::Likelihood;
use super::model::MiwaeModel;
use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::numcore::Matrix;
use crate::rng::stream;
use crate::scalar::{gaussian_log_pdf, log_sum_exp, Real};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;

/// `m` completions of one row plus the self-normalized weights behind them.
#[derive(Clone, Debug)]
pub struct ImputationDraws<T> {
    pub completions: Matrix<T>,
    pub weights: Vec<T>,
}

struct Posterior<T> {
    loc: Matrix<T>,
    scale: Matrix<T>,
    weights: Vec<T>,
}

fn check_row<T: Real>(model: &MiwaeModel<T>, row: &[T], observed: &[bool]) -> Result<()> {
    let p = model.config().n_features;
    if row.len() != p || observed.len() != p {
        return Err(Error::Dimension(format!(
            "row of {} values / {} mask cells, model expects {p}",
            row.len(),
            observed.len()
        )));
    }
    if !observed.iter().any(|&o| o) {
        return Err(Error::Data("row has no observed entries".into()));
    }
    Ok(())
}

/// Draws `l` latent samples for one row and returns the decoder outputs with
/// their normalized importance weights, computed in log space.
fn posterior<T: Real, R: Rng>(model: &MiwaeModel<T>, row: &[T], observed: &[bool], l: usize, rng: &mut R) -> Result<Posterior<T>> {
    let p = row.len();
    let d = model.config().latent_dim;
    let density = model.density();
    let x0 = Matrix::from_fn(1, p, |_, j| if observed[j] { row[j] } else { T::zero() });
    let (mu, sigma) = model.encode(&x0)?;
    let eps = draw_noise::<T, _>(1, l, d, rng);
    let z = Matrix::from_fn(l, d, |i, j| mu.get(0, j) + sigma.get(0, j) * eps.get(i, j));
    let (loc, scale) = model.decode(&z)?;
    let log_w: Vec<T> = (0..l)
        .map(|i| {
            let mut lw = T::zero();
            for j in 0..p {
                if observed[j] {
                    lw += density.log_pdf(row[j], loc.get(i, j), scale.get(i, j));
                }
            }
            for k in 0..d {
                let zk = z.get(i, k);
                lw += gaussian_log_pdf(zk, T::zero(), T::one()) - gaussian_log_pdf(zk, mu.get(0, k), sigma.get(0, k));
            }
            lw
        })
        .collect();
    let norm = log_sum_exp(&log_w);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("importance log-weights normalize to {norm}")));
    }
    let weights = log_w.iter().map(|&w| (w - norm).exp()).collect();
    Ok(Posterior { loc, scale, weights })
}

/// Conditional-expectation imputation of one row by self-normalized
/// importance sampling with `l` latent draws. Observed cells are copied.
pub fn impute_single<T: Real, R: Rng>(model: &MiwaeModel<T>, row: &[T], observed: &[bool], l: usize, rng: &mut R) -> Result<Vec<T>> {
    check_row(model, row, observed)?;
    if observed.iter().all(|&o| o) {
        return Ok(row.to_vec());
    }
    let post = posterior(model, row, observed, l, rng)?;
    let mut out = row.to_vec();
    for (j, o) in out.iter_mut().enumerate() {
        if !observed[j] {
            *o = post.weights.iter().enumerate().map(|(i, &w)| w * post.loc.get(i, j)).sum();
        }
    }
    Ok(out)
}

fn sample_obs<T: Real, R: Rng>(likelihood: &Likelihood, loc: T, scale: T, rng: &mut R) -> T {
    let e: f64 = match *likelihood {
        Likelihood::Gaussian => rng.sample(StandardNormal),
        Likelihood::StudentT { df } => StudentT::new(df).expect("validated df").sample(rng),
    };
    loc + scale * T::lit(e)
}

/// `m` completions by sampling-importance-resampling: latent draws are
/// resampled by weight, then missing cells are sampled from the decoder.
pub fn impute_multiple<T: Real, R: Rng>(
    model: &MiwaeModel<T>,
    row: &[T],
    observed: &[bool],
    l: usize,
    m: usize,
    rng: &mut R,
) -> Result<ImputationDraws<T>> {
    check_row(model, row, observed)?;
    if m == 0 {
        return Err(Error::Usage("multiple imputation needs m >= 1".into()));
    }
    let post = posterior(model, row, observed, l, rng)?;
    let w64: Vec<f64> = post.weights.iter().map(|w| w.as_f64()).collect();
    let picker = WeightedIndex::new(&w64).map_err(|e| Error::Numeric(format!("importance weights: {e}")))?;
    let likelihood = model.config().likelihood;
    let p = row.len();
    let mut completions = Matrix::zeros(m, p);
    for draw in 0..m {
        let idx = picker.sample(rng);
        let out = completions.row_mut(draw);
        for j in 0..p {
            out[j] = if observed[j] {
                row[j]
            } else {
                sample_obs(&likelihood, post.loc.get(idx, j), post.scale.get(idx, j), rng)
            };
        }
    }
    Ok(ImputationDraws { completions, weights: post.weights })
}

/// `m` draws from the prior predictive `z ~ N(0, I)`, `x ~ p(x|z)`.
pub fn prior_predictive<T: Real, R: Rng>(model: &MiwaeModel<T>, m: usize, rng: &mut R) -> Result<Matrix<T>> {
    let d = model.config().latent_dim;
    let z = draw_noise::<T, _>(m, 1, d, rng);
    let (loc, scale) = model.decode(&z)?;
    let likelihood = model.config().likelihood;
    Ok(Matrix::from_fn(m, loc.cols(), |i, j| sample_obs(&likelihood, loc.get(i, j), scale.get(i, j), rng)))
}

/// Imputes every row; row `i` uses the random stream `(seed, i)`, so the
/// result does not depend on how rows are scheduled.
pub fn impute_dataset<T: Real>(model: &MiwaeModel<T>, data: &MaskedMatrix<T>, l: usize, seed: u64) -> Result<Matrix<T>> {
    if data.cols() != model.config().n_features {
        return Err(Error::Dimension(format!(
            "data has {} columns, model expects {}",
            data.cols(),
            model.config().n_features
        )));
    }
    let rows: Vec<Vec<T>> = (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            impute_single(model, data.values().row(i), data.mask().row(i), l, &mut rng)
                .map_err(|e| match e {
                    Error::Data(msg) => Error::Data(format!("row {i}: {msg}")),
                    other => other,
                })
        })
        .collect::<Result<_>>()?;
    let flat = rows.into_iter().flatten().collect();
    Matrix::from_vec(data.rows(), data.cols(), flat)
}

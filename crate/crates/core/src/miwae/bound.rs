//! The importance-weighted observed-data bound used as the training loss.

use super::model::{MiwaeModel, DECODER, ENCODER};
use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::numcore::{mlp_forward_traced, Matrix, ParamVector, Tape, Var};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Standard normal draws laid out `(rows*k) x d`, row `i*k + j` for sample `j`
/// of data row `i`.
pub fn draw_noise<T: Real, R: Rng>(rows: usize, k: usize, d: usize, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows * k, d, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn layers<T: Real>(tape: &mut Tape<T>, params: &ParamVector<T>, prefix: &str, n: usize) -> Result<Vec<(Var, Var)>> {
    (0..n)
        .map(|i| Ok((tape.param(params, &format!("{prefix}.w{i}"))?, tape.param(params, &format!("{prefix}.b{i}"))?)))
        .collect()
}

/// Records the negative bound on `tape` and returns the loss node.
fn trace_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &MiwaeModel<T>,
    batch: &MaskedMatrix<T>,
    k: usize,
    noise: Matrix<T>,
) -> Result<Var> {
    let cfg = model.config();
    let (n, p, d) = (batch.rows(), cfg.n_features, cfg.latent_dim);
    if batch.cols() != p {
        return Err(Error::Dimension(format!("batch has {} columns, model expects {p}", batch.cols())));
    }
    if k == 0 || n == 0 {
        return Err(Error::Usage("bound needs k >= 1 and a non-empty batch".into()));
    }
    batch.require_observed_rows()?;
    if noise.shape() != (n * k, d) {
        return Err(Error::Dimension(format!("noise is {}x{}, expected {}x{d}", noise.rows(), noise.cols(), n * k)));
    }
    let floor = model.floor();
    let params = model.params();
    let enc = layers(tape, params, ENCODER, 3)?;
    let dec = layers(tape, params, DECODER, 3)?;

    let data = Arc::new(batch.values().clone());
    let mask = Arc::new(batch.mask().as_slice().to_vec());
    let x = tape.constant((*data).clone());
    let h = mlp_forward_traced(tape, &enc, x, cfg.activation)?;
    let mu = tape.slice_cols(h, 0, d)?;
    let raw = tape.slice_cols(h, d, 2 * d)?;
    let sp = tape.softplus(raw);
    let sigma = tape.add_scalar(sp, floor);
    let mu_k = tape.repeat_rows(mu, k);
    let sigma_k = tape.repeat_rows(sigma, k);
    let eps = tape.constant(noise);
    let spread = tape.mul(sigma_k, eps)?;
    let z = tape.add(mu_k, spread)?;

    let head = mlp_forward_traced(tape, &dec, z, cfg.activation)?;
    let log_px = tape.masked_log_likelihood(head, data, mask, k, floor, model.density())?;

    let zeros = tape.constant(Matrix::zeros(n * k, d));
    let ones = tape.constant(Matrix::filled(n * k, d, T::one()));
    let prior = tape.gaussian_log_pdf(z, zeros, ones)?;
    let log_pz = tape.sum_cols(prior);
    let post = tape.gaussian_log_pdf(z, mu_k, sigma_k)?;
    let log_qz = tape.sum_cols(post);

    let joint = tape.add(log_px, log_pz)?;
    let log_w = tape.sub(joint, log_qz)?;
    let log_w = tape.reshape(log_w, n, k)?;
    let lse = tape.log_sum_exp_rows(log_w);
    let avg = tape.mean(lse);
    let neg = tape.scale(avg, -T::one());
    Ok(tape.add_scalar(neg, T::from_usize(k).unwrap().ln()))
}

/// Negative importance-weighted bound with explicit reparameterization noise.
pub fn miwae_bound_with_noise<T: Real>(model: &MiwaeModel<T>, batch: &MaskedMatrix<T>, k: usize, noise: Matrix<T>) -> Result<T> {
    let mut tape = Tape::new();
    let loss = trace_loss(&mut tape, model, batch, k, noise)?;
    finite(tape.scalar(loss))
}

/// Negative `k`-sample bound on the observed-data log-likelihood, averaged
/// over rows. This is the training loss.
pub fn miwae_bound<T: Real, R: Rng>(model: &MiwaeModel<T>, batch: &MaskedMatrix<T>, k: usize, rng: &mut R) -> Result<T> {
    let noise = draw_noise(batch.rows(), k, model.config().latent_dim, rng);
    miwae_bound_with_noise(model, batch, k, noise)
}

/// Loss and its gradient with respect to all model parameters.
pub fn miwae_bound_grad<T: Real, R: Rng>(
    model: &MiwaeModel<T>,
    batch: &MaskedMatrix<T>,
    k: usize,
    rng: &mut R,
) -> Result<(T, ParamVector<T>)> {
    let noise = draw_noise(batch.rows(), k, model.config().latent_dim, rng);
    miwae_bound_grad_with_noise(model, batch, k, noise)
}

pub fn miwae_bound_grad_with_noise<T: Real>(
    model: &MiwaeModel<T>,
    batch: &MaskedMatrix<T>,
    k: usize,
    noise: Matrix<T>,
) -> Result<(T, ParamVector<T>)> {
    let mut tape = Tape::new();
    let loss = trace_loss(&mut tape, model, batch, k, noise)?;
    let value = finite(tape.scalar(loss))?;
    let grad = tape.backward(loss, model.params().layout())?;
    Ok((value, grad))
}

fn finite<T: Real>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("bound evaluated to {v}")))
    }
}

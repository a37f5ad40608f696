use super::*;
use crate::masked::{Mask, MaskedMatrix};
use crate::numcore::Matrix;
use crate::rng::stream;
use crate::Error;

fn tiny(p: usize, d: usize, h: usize, seed: u64) -> MiwaeModel<f64> {
    let cfg = MiwaeConfig { n_features: p, latent_dim: d, hidden_units: h, k_train: 3, l_test: 5, ..Default::default() };
    let mut m = MiwaeModel::init(cfg, &mut stream(seed, &[])).unwrap();
    // Non-zero biases so the oracle exercises every parameter.
    for (i, v) in m.params_mut().as_mut_slice().iter_mut().enumerate() {
        *v += ((i * 7919 % 13) as f64 - 6.0) * 0.01;
    }
    m
}

fn masked(rows: &[Vec<Option<f64>>]) -> MaskedMatrix<f64> {
    let p = rows[0].len();
    let v = Matrix::from_vec(rows.len(), p, rows.iter().flatten().map(|x| x.unwrap_or(0.0)).collect()).unwrap();
    let m = Mask::from_vec(rows.len(), p, rows.iter().flatten().map(Option::is_some).collect()).unwrap();
    MaskedMatrix::new(v, m).unwrap()
}

// ---- independent scalar oracle -------------------------------------------

fn sp(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn ln_normal(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * ((x - m) / s).powi(2)
}

/// Reads weights straight from the parameter buffer, layer by layer.
fn scalar_net(model: &MiwaeModel<f64>, prefix: &str, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for l in 0..3 {
        let w = model.params().segment_matrix(&format!("{prefix}.w{l}")).unwrap();
        let b = model.params().segment(&format!("{prefix}.b{l}")).unwrap();
        let mut out = vec![0.0; w.cols()];
        for o in 0..w.cols() {
            let mut acc = b[o];
            for i in 0..w.rows() {
                acc += h[i] * w.get(i, o);
            }
            out[o] = if l < 2 { acc.tanh() } else { acc };
        }
        h = out;
    }
    h
}

/// log p(x_obs|z) + log p(z) − log q(z|x_obs) for one row and one noise draw.
fn scalar_log_weight(model: &MiwaeModel<f64>, row: &[Option<f64>], eps: &[f64]) -> f64 {
    let p = row.len();
    let d = eps.len();
    let x0: Vec<f64> = row.iter().map(|x| x.unwrap_or(0.0)).collect();
    let enc = scalar_net(model, "encoder", &x0);
    let mut lw = 0.0;
    let mut z = vec![0.0; d];
    for k in 0..d {
        let mu = enc[k];
        let s = sp(enc[d + k]) + 1e-3;
        z[k] = mu + s * eps[k];
        lw += ln_normal(z[k], 0.0, 1.0) - ln_normal(z[k], mu, s);
    }
    let dec = scalar_net(model, "decoder", &z);
    for j in 0..p {
        if let Some(x) = row[j] {
            lw += ln_normal(x, dec[j], sp(dec[p + j]) + 1e-3);
        }
    }
    lw
}

fn scalar_decoder_mean(model: &MiwaeModel<f64>, row: &[Option<f64>], eps: &[f64]) -> Vec<f64> {
    let d = eps.len();
    let x0: Vec<f64> = row.iter().map(|x| x.unwrap_or(0.0)).collect();
    let enc = scalar_net(model, "encoder", &x0);
    let z: Vec<f64> = (0..d).map(|k| enc[k] + (sp(enc[d + k]) + 1e-3) * eps[k]).collect();
    scalar_net(model, "decoder", &z)[..row.len()].to_vec()
}

fn scalar_loss(model: &MiwaeModel<f64>, rows: &[Vec<Option<f64>>], k: usize, noise: &Matrix<f64>) -> f64 {
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let lws: Vec<f64> = (0..k).map(|j| scalar_log_weight(model, row, noise.row(i * k + j))).collect();
        let m = lws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + lws.iter().map(|w| (w - m).exp()).sum::<f64>().ln() - (k as f64).ln();
    }
    -total / rows.len() as f64
}

// ---- bound ------------------------------------------------------------------

#[test]
fn fully_observed_k1_is_the_elbo() {
    let model = tiny(3, 2, 4, 1);
    let rows = vec![vec![Some(0.2), Some(-1.0), Some(0.7)], vec![Some(1.1), Some(0.3), Some(-0.4)]];
    let noise = draw_noise::<f64, _>(2, 1, 2, &mut stream(5, &[]));
    let loss = miwae_bound_with_noise(&model, &masked(&rows), 1, noise.clone()).unwrap();
    let elbo: f64 = rows.iter().enumerate().map(|(i, r)| scalar_log_weight(&model, r, noise.row(i))).sum::<f64>() / 2.0;
    assert!((loss + elbo).abs() < 1e-12, "{loss} vs {}", -elbo);
}

#[test]
fn single_row_one_missing_matches_scalar_script() {
    let model = tiny(2, 1, 3, 2);
    let rows = vec![vec![Some(0.8), None]];
    let noise = Matrix::from_rows(&[vec![0.3], vec![-1.2]]).unwrap();
    let loss = miwae_bound_with_noise(&model, &masked(&rows), 2, noise.clone()).unwrap();
    let expect = scalar_loss(&model, &rows, 2, &noise);
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn missing_cells_do_not_enter_the_bound() {
    let model = tiny(3, 2, 4, 3);
    let a = masked(&[vec![Some(0.5), None, Some(1.0)]]);
    // Same observed values, different garbage behind the mask.
    let v = Matrix::from_rows(&[vec![0.5, 99.0, 1.0]]).unwrap();
    let b = MaskedMatrix::new(v, a.mask().clone()).unwrap();
    let noise = draw_noise::<f64, _>(1, 4, 2, &mut stream(0, &[]));
    assert_eq!(
        miwae_bound_with_noise(&model, &a, 4, noise.clone()).unwrap(),
        miwae_bound_with_noise(&model, &b, 4, noise).unwrap()
    );
}

#[test]
fn empty_row_is_a_data_error() {
    let model = tiny(2, 1, 3, 4);
    let batch = masked(&[vec![Some(1.0), Some(2.0)], vec![None, None]]);
    match miwae_bound(&model, &batch, 2, &mut stream(0, &[])) {
        Err(Error::Data(msg)) => assert!(msg.contains("row 1")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn more_importance_samples_tighten_the_bound() {
    let model = tiny(3, 2, 5, 6);
    let batch = masked(&[
        vec![Some(0.5), None, Some(-1.0)],
        vec![Some(-0.2), Some(0.9), None],
        vec![None, Some(1.4), Some(0.3)],
    ]);
    let diffs: Vec<f64> = (0..200u64)
        .map(|s| {
            let l1 = miwae_bound(&model, &batch, 1, &mut stream(s, &[1])).unwrap();
            let l20 = miwae_bound(&model, &batch, 20, &mut stream(s, &[20])).unwrap();
            l1 - l20
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    // One-sided test at 0.01.
    assert!(t > 2.326, "t = {t}, mean diff {mean}");
}

fn fd_check(model: &MiwaeModel<f64>, batch: &MaskedMatrix<f64>, k: usize, seed: u64) {
    let d = model.config().latent_dim;
    let noise = draw_noise::<f64, _>(batch.rows(), k, d, &mut stream(seed, &[]));
    let (_, g) = miwae_bound_grad_with_noise(model, batch, k, noise.clone()).unwrap();
    let h = 1e-5;
    for i in 0..model.params().len() {
        let mut up = model.clone();
        up.params_mut().as_mut_slice()[i] += h;
        let mut dn = model.clone();
        dn.params_mut().as_mut_slice()[i] -= h;
        let fd = (miwae_bound_with_noise(&up, batch, k, noise.clone()).unwrap()
            - miwae_bound_with_noise(&dn, batch, k, noise.clone()).unwrap())
            / (2.0 * h);
        let a = g.as_slice()[i];
        let scale = a.abs().max(fd.abs());
        assert!(scale < 1e-8 || (a - fd).abs() / scale < 1e-4, "param {i}: analytic {a}, numeric {fd}");
    }
}

#[test]
fn bound_gradient_matches_finite_differences() {
    let model = tiny(3, 2, 4, 7);
    let batch = masked(&[
        vec![Some(0.5), None, Some(-1.0)],
        vec![Some(-0.2), Some(0.9), None],
        vec![None, Some(1.4), Some(0.3)],
        vec![Some(1.0), Some(-0.6), Some(0.1)],
    ]);
    fd_check(&model, &batch, 3, 11);
}

#[test]
fn student_t_bound_gradient_matches_finite_differences() {
    let cfg = MiwaeConfig {
        n_features: 3,
        latent_dim: 2,
        hidden_units: 3,
        likelihood: Likelihood::StudentT { df: 5.0 },
        ..Default::default()
    };
    let model = MiwaeModel::init(cfg, &mut stream(8, &[])).unwrap();
    let batch = masked(&[vec![Some(0.5), None, Some(-1.0)], vec![Some(-0.2), Some(0.9), None]]);
    fd_check(&model, &batch, 2, 12);
}

#[test]
fn bound_is_seed_deterministic() {
    let model = tiny(3, 2, 4, 9);
    let batch = masked(&[vec![Some(0.5), None, Some(-1.0)]]);
    let a = miwae_bound_grad(&model, &batch, 5, &mut stream(3, &[])).unwrap();
    let b = miwae_bound_grad(&model, &batch, 5, &mut stream(3, &[])).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

// ---- imputation ---------------------------------------------------------------

#[test]
fn fully_observed_row_is_returned_unchanged() {
    let model = tiny(3, 2, 4, 10);
    let row = [0.1, 0.2, 0.3];
    let out = impute_single(&model, &row, &[true; 3], 10, &mut stream(0, &[])).unwrap();
    assert_eq!(out, row);
}

#[test]
fn single_draw_imputes_decoder_mean() {
    let model = tiny(2, 1, 3, 11);
    let row = [0.4, 0.0];
    let obs = [true, false];
    let eps = draw_noise::<f64, _>(1, 1, 1, &mut stream(21, &[]));
    let out = impute_single(&model, &row, &obs, 1, &mut stream(21, &[])).unwrap();
    let mean = scalar_decoder_mean(&model, &[Some(0.4), None], eps.row(0));
    assert_eq!(out[0], 0.4);
    assert!((out[1] - mean[1]).abs() < 1e-12);
}

#[test]
fn three_draws_match_self_normalized_average() {
    let model = tiny(2, 1, 3, 12);
    let row = [None, Some(-0.7)];
    let eps = draw_noise::<f64, _>(1, 3, 1, &mut stream(33, &[]));
    let out = impute_single(&model, &[0.0, -0.7], &[false, true], 3, &mut stream(33, &[])).unwrap();
    let lw: Vec<f64> = (0..3).map(|l| scalar_log_weight(&model, &row, eps.row(l))).collect();
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let expect: f64 = (0..3).map(|l| w[l] / z * scalar_decoder_mean(&model, &row, eps.row(l))[0]).sum();
    assert!((out[0] - expect).abs() < 1e-12, "{} vs {expect}", out[0]);
    assert_eq!(out[1], -0.7);
}

#[test]
fn thirty_draws_keep_observed_coordinates() {
    let model = tiny(4, 2, 5, 13);
    let row = [0.3, 0.0, -1.2, 0.0];
    let obs = [true, false, true, false];
    let draws = impute_multiple(&model, &row, &obs, 50, 30, &mut stream(1, &[])).unwrap();
    assert_eq!(draws.completions.rows(), 30);
    for r in 0..30 {
        assert_eq!(draws.completions.get(r, 0), 0.3);
        assert_eq!(draws.completions.get(r, 2), -1.2);
    }
    assert!((draws.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let distinct = (1..30).any(|r| draws.completions.get(r, 1) != draws.completions.get(0, 1));
    assert!(distinct);
}

#[test]
fn floored_decoder_scale_gives_tight_draws() {
    let mut model = tiny(2, 1, 3, 14);
    let p = 2;
    // Zero the scale half of the decoder head and push its bias far negative.
    let w2 = model.params().layout().segment("decoder.w2").unwrap().clone();
    let b2 = model.params().layout().segment("decoder.b2").unwrap().clone();
    let vals = model.params_mut().as_mut_slice();
    for r in 0..w2.rows {
        for c in p..2 * p {
            vals[w2.offset + r * w2.cols + c] = 0.0;
        }
    }
    for c in p..2 * p {
        vals[b2.offset + c] = -60.0;
    }
    let row = [0.5, 0.0];
    let obs = [true, false];
    let draws = impute_multiple(&model, &row, &obs, 1, 1000, &mut stream(2, &[])).unwrap();
    let eps = draw_noise::<f64, _>(1, 1, 1, &mut stream(2, &[]));
    let mean = scalar_decoder_mean(&model, &[Some(0.5), None], eps.row(0))[1];
    let xs: Vec<f64> = (0..1000).map(|r| draws.completions.get(r, 1)).collect();
    assert!(xs.iter().all(|x| (x - mean).abs() < 5e-3));
    let m = xs.iter().sum::<f64>() / 1000.0;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 999.0).sqrt();
    assert!(sd > 0.5e-3 && sd < 2e-3, "sd = {sd}");
}

#[test]
fn dataset_imputation_touches_only_missing_cells() {
    let model = tiny(3, 2, 4, 15);
    let full = masked(&[vec![Some(1.0), Some(2.0), Some(3.0)], vec![Some(-1.0), Some(0.0), Some(0.5)]]);
    assert_eq!(&impute_dataset(&model, &full, 20, 0).unwrap(), full.values());
    let one = masked(&[vec![Some(1.0), None, Some(3.0)], vec![Some(-1.0), Some(0.0), Some(0.5)]]);
    let out = impute_dataset(&model, &one, 20, 0).unwrap();
    let diff: Vec<(usize, usize)> = (0..2)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|&(i, j)| out.get(i, j) != one.values().get(i, j))
        .collect();
    assert_eq!(diff, vec![(0, 1)]);
    assert_eq!(out, impute_dataset(&model, &one, 20, 0).unwrap());
}

#[test]
fn model_file_round_trips() {
    let model = tiny(3, 2, 4, 16);
    let scaler = crate::fedstd::GlobalScaler { mu: vec![0.1, 0.2, 0.3], sigma: vec![1.0, 2.0, 3.0], n: vec![4, 5, 6] };
    let mut buf = Vec::new();
    write_model(&mut buf, &model, Some(&scaler)).unwrap();
    let (back, s) = read_model::<f64, _>(&mut buf.as_slice()).unwrap();
    assert_eq!(back, model);
    assert_eq!(s, Some(scaler));
    buf[0] = b'X';
    assert!(matches!(read_model::<f64, _>(&mut buf.as_slice()), Err(Error::Format(_))));
}

#[test]
fn single_precision_model_runs() {
    let cfg = MiwaeConfig { n_features: 3, latent_dim: 2, hidden_units: 4, ..Default::default() };
    let model = MiwaeModel::<f32>::init(cfg, &mut stream(0, &[])).unwrap();
    let batch = masked(&[vec![Some(0.5), None, Some(-1.0)]]).convert::<f32>();
    let (loss, g) = miwae_bound_grad(&model, &batch, 4, &mut stream(1, &[])).unwrap();
    assert!(loss.is_finite() && g.first_non_finite().is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bound_is_finite_and_imputation_preserves_observed(
            seed in any::<u64>(),
            scale in 0.1f64..5.0,
            cells in prop::collection::vec(prop::option::weighted(0.6, -3.0f64..3.0), 12),
        ) {
            let mut model = tiny(4, 2, 3, seed);
            for v in model.params_mut().as_mut_slice() { *v *= scale; }
            let mut rows: Vec<Vec<Option<f64>>> = cells.chunks(4).map(|c| c.to_vec()).collect();
            for r in &mut rows { if r.iter().all(Option::is_none) { r[0] = Some(0.0); } }
            let batch = masked(&rows);
            let loss = miwae_bound(&model, &batch, 3, &mut stream(seed, &[1])).unwrap();
            prop_assert!(loss.is_finite());
            let out = impute_dataset(&model, &batch, 8, seed).unwrap();
            for i in 0..3 { for j in 0..4 {
                if let Some(x) = batch.get(i, j) { prop_assert_eq!(out.get(i, j), x); }
                prop_assert!(out.get(i, j).is_finite());
            }}
        }
    }
}

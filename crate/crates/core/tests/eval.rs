use fedimpute::datasets::{feature_names, gen_synthetic, save_csv, SyntheticSpec};
use fedimpute::eval::{normalized_mse, prepare_runs, run_experiment, scoring_mask, DataSource, ExperimentConfig, ImputationReport, Normalization};
use fedimpute::masked::Mask;
use fedimpute::missingness::Mechanism;
use fedimpute::numcore::Matrix;
use fedimpute::rng::stream;
use proptest::prelude::*;
use rand::Rng;
use std::path::Path;

fn tiny(out: &Path, arms: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: 3, repetitions: 2, output_dir: out.to_path_buf(), ..Default::default() };
    cfg.arms = arms.iter().map(|s| s.to_string()).collect();
    if let DataSource::Synthetic { synthetic, .. } = &mut cfg.data {
        synthetic.n_features = 8;
        synthetic.latent_rank = 2;
    }
    cfg.miwae.hidden_units = 8;
    cfg.miwae.latent_dim = 2;
    cfg.miwae.k_train = 4;
    cfg.miwae.l_test = 20;
    cfg.plan.rounds = 2;
    cfg.plan.local_epochs = 1;
    cfg.eval.mi_draws = 5;
    cfg
}

#[test]
fn normalized_mse_matches_hand_computation() {
    let truth = Matrix::from_fn(5, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 3.0);
    let imputed = Matrix::from_fn(5, 4, |i, j| truth.get(i, j) + if (i + j) % 2 == 0 { 0.25 } else { -1.0 });
    let hidden = [(0, 1), (1, 3), (2, 0), (2, 2), (4, 1)];
    let mut scored = Mask::all_observed(5, 4);
    for &(i, j) in &hidden {
        scored.set(i, j, false);
    }
    let errs: Vec<f64> = hidden.iter().map(|&(i, j)| imputed.get(i, j) - truth.get(i, j)).collect();
    let ts: Vec<f64> = hidden.iter().map(|&(i, j)| truth.get(i, j)).collect();
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / 5.0;
    let mean = ts.iter().sum::<f64>() / 5.0;
    let var = ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 5.0;
    let g = normalized_mse(&imputed, &truth, &scored, Normalization::Global).unwrap();
    assert!((g - mse / var).abs() < 1e-12);
    assert!((normalized_mse(&imputed, &truth, &scored, Normalization::None).unwrap() - mse).abs() < 1e-12);

    // Per feature: column 1 has two hidden cells (0,1) and (4,1); the
    // other columns have a single cell and zero variance.
    let err = normalized_mse(&imputed, &truth, &scored, Normalization::PerFeature).unwrap_err();
    assert!(err.to_string().contains("feature 0"), "{err}");
}

#[test]
fn constant_mean_of_hidden_truth_scores_one() {
    let mut rng = stream(2, &[]);
    let truth = Matrix::from_fn(30, 3, |_, _| rng.gen_range(-2.0..2.0));
    let scored = Mask::from_vec(30, 3, (0..90).map(|k| k % 4 != 0).collect()).unwrap();
    let hidden: Vec<f64> = (0..90).filter(|k| k % 4 == 0).map(|k| truth.as_slice()[k]).collect();
    let m = hidden.iter().sum::<f64>() / hidden.len() as f64;
    let imputed = Matrix::filled(30, 3, m);
    assert!((normalized_mse(&imputed, &truth, &scored, Normalization::Global).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn scoring_mask_skips_cells_missing_in_the_source() {
    let sim = Mask::from_vec(1, 3, vec![false, false, true]).unwrap();
    let src = Mask::from_vec(1, 3, vec![true, false, true]).unwrap();
    assert_eq!(scoring_mask(&sim, &src).unwrap().as_slice(), &[false, true, true]);
}

proptest! {
    #[test]
    fn observed_cells_never_affect_the_score(seed in 0u64..500, noise in -5.0f64..5.0) {
        let mut rng = stream(seed, &[]);
        let truth = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-3.0..3.0));
        let imputed = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-3.0..3.0));
        let scored = Mask::from_vec(6, 4, (0..24).map(|k| k % 3 != 1).collect()).unwrap();
        let poke = |m: &Matrix<f64>| Matrix::from_fn(6, 4, |i, j| if scored.is_observed(i, j) { m.get(i, j) + noise } else { m.get(i, j) });
        for how in [Normalization::Global, Normalization::PerFeature, Normalization::None] {
            let a = normalized_mse(&imputed, &truth, &scored, how).unwrap();
            let b = normalized_mse(&poke(&imputed), &poke(&truth), &scored, how).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn mean_arm_reports_one_cell_per_dataset_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["mean"]);
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.cells.len(), 3);
    assert!(r.cells.iter().all(|c| c.n_runs == 2 && c.std.is_some()));
    assert_eq!(r.datasets, vec!["client_1", "client_2", "test"]);
    assert_eq!(r.external.get("rf"), Some(&None));
    for f in ["report.json", "tables/mse_summary.csv", "tables/mse_runs.csv", "plotdata/mse_distribution.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = ImputationReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.provenance.config_hash, cfg.hash().unwrap());
    assert_eq!(r.provenance.run_seeds.len(), 2);
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let arms = ["fedprox", "scaffold", "local", "mean_loc", "ice"];
    run_experiment(&tiny(a.path(), &arms)).unwrap();
    run_experiment(&tiny(b.path(), &arms)).unwrap();
    let mut other = tiny(c.path(), &arms);
    other.seed = 4;
    run_experiment(&other).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "report.json"), read(b.path(), "report.json"));
    assert_eq!(read(a.path(), "transcript.jsonl"), read(b.path(), "transcript.jsonl"));
    assert_eq!(read(a.path(), "models/fedprox_r1_f0.bin"), read(b.path(), "models/fedprox_r1_f0.bin"));
    let (ra, rc) = (read(a.path(), "tables/mse_runs.csv"), read(c.path(), "tables/mse_runs.csv"));
    assert_ne!(ra, rc);
}

#[test]
fn local_arms_train_on_one_client_each() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&tiny(dir.path(), &["local", "centralized"])).unwrap();
    assert_eq!(r.arms, vec!["local_1", "local_2", "centralized"]);
    assert!(r.failures.is_empty());
    let t = std::fs::read_to_string(dir.path().join("transcript.jsonl")).unwrap();
    let first = t.lines().find(|l| l.contains("\"local_1/r0/f0\"") && l.contains("client_update")).unwrap();
    assert!(first.contains("\"client\":0"));
    assert!(!t.lines().any(|l| l.contains("\"local_1/") && l.contains("\"client\":1")));
}

fn write_clients(dir: &Path, constant_column: bool) -> DataSource {
    let d = gen_synthetic(&SyntheticSpec { n_features: 6, latent_rank: 2, seed: 9, ..Default::default() }).unwrap();
    let header = feature_names(6);
    let mut rng = stream(1, &[]);
    let mut paths = Vec::new();
    for (k, rows) in [0..100, 100..220, 220..311].into_iter().enumerate() {
        let idx: Vec<usize> = rows.collect();
        let mut x = d.values.select_rows(&idx);
        if constant_column {
            for i in 0..x.rows() {
                x.set(i, 5, 1.0);
            }
        }
        // Some cells are missing in the source itself; they are never scored.
        let mask = Mask::from_vec(x.rows(), 6, (0..x.rows() * 6).map(|c| c % 6 == 0 || !rng.gen_bool(0.05)).collect()).unwrap();
        let p = dir.join(format!("part{k}.csv"));
        save_csv(&p, &header, &x, Some(&mask), "NA").unwrap();
        paths.push(p);
    }
    let test = paths.pop().unwrap();
    DataSource::Csv { clients: paths, test, missing_tokens: vec!["".into(), "NA".into()] }
}

#[test]
fn csv_source_runs_fixed_clients() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("out"), &["mean", "ice", "fedavg"]);
    cfg.data = write_clients(dir.path(), false);
    let runs = prepare_runs(&cfg).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].datasets.iter().map(|d| d.truth.rows()).collect::<Vec<_>>(), vec![100, 120, 91]);
    for d in &runs[0].datasets {
        // Cells still observed after simulation are never scored.
        assert!(d.masked.mask().as_slice().iter().zip(d.scored.as_slice()).all(|(&o, &s)| !o || s));
    }
    let r = run_experiment(&cfg).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert!(r.cells.iter().all(|c| c.n_runs == 2));
}

#[test]
fn failing_arms_are_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("out"), &["mean", "ice"]);
    cfg.data = write_clients(dir.path(), true);
    cfg.eval.normalization = Normalization::PerFeature;
    // MCAR so the constant column is certain to have hidden cells.
    cfg.mask.mechanism = Mechanism::Mcar;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.failures.len(), 4);
    assert!(r.failures.iter().all(|f| f.message.contains("feature 5")), "{:?}", r.failures);
    assert!(r.cells.iter().all(|c| c.n_runs == 0 && c.mean.is_none()));
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn trained_model_contracts_the_imputation_spread() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), &["fedprox"]);
    cfg.repetitions = 1;
    if let DataSource::Synthetic { synthetic, .. } = &mut cfg.data {
        synthetic.n_features = 16;
        synthetic.latent_rank = 3;
        synthetic.noise = 0.2;
    }
    cfg.miwae.hidden_units = 32;
    cfg.miwae.latent_dim = 4;
    cfg.miwae.k_train = 10;
    cfg.miwae.l_test = 200;
    cfg.plan.rounds = 40;
    cfg.plan.local_epochs = 5;
    cfg.eval.mi_draws = 30;
    let r = run_experiment(&cfg).unwrap();
    let mi = &r.multiple_imputation[0].table;
    assert!(mi.observed_constant);
    assert_eq!(mi.draws, 30);
    assert!(mi.median_posterior_std < mi.median_prior_std, "{} vs {}", mi.median_posterior_std, mi.median_prior_std);
    let fed = r.score(0, 0, "fedprox", "test").unwrap();
    assert!(fed < 1.0, "fedprox test {fed}");
}

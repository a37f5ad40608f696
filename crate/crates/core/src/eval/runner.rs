use super::config::{Arm, DataSource, ExperimentConfig};
use super::metrics::{normalized_mse, scoring_mask};
use super::report::{Failure, ImputationReport, MiRecord, Provenance, RunScore, RunSeed};
use super::uncertainty::{mi_uncertainty, UncertaintyTable};
use crate::baselines::{ice_fit, mean_fit_impute};
use crate::datasets::{crossval_runs, gen_synthetic, load_csv, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{federated_standardize, run_centralized, run_training, run_training_with, AggregatorKind, ClientState, RoundPlan, Transcript};
use crate::fedstd::{aggregate_moments, apply_scaler, local_moments, local_scaler, GlobalScaler};
use crate::masked::{Mask, MaskedMatrix};
use crate::missingness::simulate_mask;
use crate::miwae::{impute_dataset, save_model, MiwaeModel};
use crate::numcore::Matrix;
use crate::rng::{derive_seed, stream};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

const MASK: u64 = 1;
const MASK_DESIGN: u64 = 2;
const TRAIN: u64 = 3;
const IMPUTE: u64 = 4;
const MI: u64 = 5;
const DATA: u64 = 6;

/// One dataset of a run: ground truth, the simulated observation pattern and
/// the cells to score.
#[derive(Clone, Debug)]
pub struct RunDataset {
    pub name: String,
    pub truth: Matrix<f64>,
    /// Observed after simulation (and in the source).
    pub masked: MaskedMatrix<f64>,
    /// `false` marks the scored cells.
    pub scored: Mask,
}

/// Training clients followed by the external test set.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub repetition: usize,
    pub fold: usize,
    pub seed: u64,
    pub datasets: Vec<RunDataset>,
    pub n_train: usize,
}

impl PreparedRun {
    pub fn train(&self) -> &[RunDataset] {
        &self.datasets[..self.n_train]
    }

    pub fn test(&self) -> &RunDataset {
        &self.datasets[self.n_train]
    }

    fn label(&self, arm: Arm) -> String {
        format!("{arm}/r{}/f{}", self.repetition, self.fold)
    }
}

/// Dataset names in report order.
pub fn dataset_names(n_train: usize) -> Vec<String> {
    (1..=n_train).map(|i| format!("client_{i}")).chain(std::iter::once("test".to_string())).collect()
}

fn ensure_rows(mask: &mut Mask, source: &Mask) -> Result<()> {
    for i in 0..mask.rows() {
        if mask.row(i).iter().any(|&o| o) {
            continue;
        }
        let j = source.row(i).iter().position(|&o| o).ok_or_else(|| Error::Data(format!("source row {i} has no observed entries")))?;
        mask.set(i, j, true);
    }
    Ok(())
}

fn build_dataset(cfg: &ExperimentConfig, name: String, truth: Matrix<f64>, source: Mask, run_seed: u64, d: usize) -> Result<RunDataset> {
    let spec = crate::missingness::MaskSpec { seed: derive_seed(run_seed, &[MASK_DESIGN, cfg.mask.seed]), ..cfg.mask.clone() };
    let design_input = if source.missing_count() == 0 {
        truth.clone()
    } else {
        let part = MaskedMatrix::new(truth.clone(), source.clone())?;
        mean_fit_impute(&part, &part)?
    };
    let simulated = simulate_mask(&design_input, &spec, &mut stream(run_seed, &[MASK, d as u64]))?;
    let mut observed = simulated.and(&source)?;
    ensure_rows(&mut observed, &source)?;
    let scored = scoring_mask(&observed, &source)?;
    let masked = MaskedMatrix::new(truth.clone(), observed)?;
    Ok(RunDataset { name, truth, masked, scored })
}

/// Generates or loads the data, splits it, and simulates every mask.
pub fn prepare_runs(cfg: &ExperimentConfig) -> Result<Vec<PreparedRun>> {
    cfg.validate()?;
    let mut runs = Vec::new();
    match &cfg.data {
        DataSource::Synthetic { scenario, synthetic, split } => {
            let spec = SyntheticSpec { seed: derive_seed(cfg.seed, &[DATA, synthetic.seed]), ..synthetic.clone() };
            let data = gen_synthetic(&spec)?;
            for cv in crossval_runs(*scenario, &data.labels, split, cfg.repetitions, cfg.seed)? {
                let parts: Vec<&Vec<usize>> = cv.split.clients.iter().chain(std::iter::once(&cv.split.test)).collect();
                let names = dataset_names(cv.split.clients.len());
                let datasets = parts
                    .iter()
                    .zip(names)
                    .enumerate()
                    .map(|(d, (rows, name))| {
                        let truth = data.values.select_rows(rows);
                        let source = Mask::all_observed(truth.rows(), truth.cols());
                        build_dataset(cfg, name, truth, source, cv.seed, d)
                    })
                    .collect::<Result<_>>()?;
                runs.push(PreparedRun { repetition: cv.repetition, fold: cv.fold, seed: cv.seed, datasets, n_train: cv.split.clients.len() });
            }
        }
        DataSource::Csv { clients, test, missing_tokens } => {
            let tokens: Vec<&str> = missing_tokens.iter().map(String::as_str).collect();
            let tables = clients.iter().chain(std::iter::once(test)).map(|p| load_csv(p, &tokens)).collect::<Result<Vec<_>>>()?;
            let p = tables[0].data.cols();
            if tables.iter().any(|t| t.data.cols() != p) {
                return Err(Error::Config("CSV files disagree on the number of columns".into()));
            }
            for rep in 0..cfg.repetitions {
                let seed = derive_seed(cfg.seed, &[rep as u64, 1, 0]);
                let datasets = tables
                    .iter()
                    .zip(dataset_names(clients.len()))
                    .enumerate()
                    .map(|(d, (t, name))| build_dataset(cfg, name, t.data.values().clone(), t.data.mask().clone(), seed, d))
                    .collect::<Result<_>>()?;
                runs.push(PreparedRun { repetition: rep, fold: 0, seed, datasets, n_train: clients.len() });
            }
        }
    }
    Ok(runs)
}

/// What one arm produced on one run.
pub struct ArmOutcome {
    /// `(dataset, normalized MSE)` in dataset order.
    pub scores: Vec<(String, f64)>,
    pub model: Option<(MiwaeModel<f64>, Option<GlobalScaler<f64>>)>,
    pub transcript: Option<Transcript>,
    pub uncertainty: Option<UncertaintyTable>,
}

fn global_scaler(run: &PreparedRun) -> Result<GlobalScaler<f64>> {
    let summaries = run.train().iter().map(|d| local_moments(&d.masked)).collect::<Result<Vec<_>>>()?;
    aggregate_moments(&summaries)
}

fn standardize(x: &Matrix<f64>, s: &GlobalScaler<f64>) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - s.mu[j]) / s.sigma[j])
}

fn miwae_plan(cfg: &ExperimentConfig, run: &PreparedRun, aggregator: AggregatorKind) -> RoundPlan {
    RoundPlan { aggregator, seed: derive_seed(run.seed, &[TRAIN]), ..cfg.plan.clone() }
}

/// Trains (if needed) and scores `arm` on every dataset of `run`. Scores are
/// computed after mapping imputations back to original units and then into
/// the space standardized by the pooled training moments, shared by all arms.
pub fn run_arm(cfg: &ExperimentConfig, run: &PreparedRun, arm: Arm) -> Result<ArmOutcome> {
    let reference = global_scaler(run)?;
    let scalers: Vec<GlobalScaler<f64>> = if arm.local_standardization() {
        run.datasets.iter().map(|d| local_scaler(&d.masked)).collect::<Result<_>>()?
    } else {
        vec![reference.clone(); run.datasets.len()]
    };
    let standardized: Vec<MaskedMatrix<f64>> = run.datasets.iter().zip(&scalers).map(|(d, s)| apply_scaler(&d.masked, s)).collect::<Result<_>>()?;
    let train_std = &standardized[..run.n_train];
    let miwae_cfg = cfg.miwae.clone().with_features(run.test().truth.cols());
    let prox = AggregatorKind::FedProx { mu: cfg.fedprox_mu };

    let mut transcript = None;
    let mut model: Option<(MiwaeModel<f64>, Option<GlobalScaler<f64>>)> = None;
    let federated = |agg: AggregatorKind, transcript: &mut Option<Transcript>| -> Result<MiwaeModel<f64>> {
        let mut t = Transcript::new();
        let raw: Vec<MaskedMatrix<f64>> = run.train().iter().map(|d| d.masked.clone()).collect();
        let clients_std = if arm.local_standardization() {
            train_std.to_vec()
        } else {
            let (scaler, std) = federated_standardize(&raw, &mut t)?;
            debug_assert_eq!(scaler, reference);
            std
        };
        let mut states = clients_std.into_iter().enumerate().map(|(i, d)| ClientState::new(i, d)).collect::<Result<Vec<_>>>()?;
        let m = run_training_with(&mut states, &miwae_plan(cfg, run, agg), &miwae_cfg, &mut t)?;
        *transcript = Some(t);
        Ok(m)
    };
    match arm {
        Arm::FedProx | Arm::FedAvg | Arm::Scaffold => {
            let agg = match arm {
                Arm::FedAvg => AggregatorKind::FedAvg,
                Arm::Scaffold => AggregatorKind::Scaffold,
                _ => prox,
            };
            model = Some((federated(agg, &mut transcript)?, Some(reference.clone())));
        }
        Arm::FedProxLoc => model = Some((federated(prox, &mut transcript)?, None)),
        Arm::Local(i) => {
            let (m, t) = run_training(vec![train_std[i].clone()], &miwae_plan(cfg, run, AggregatorKind::FedAvg), &miwae_cfg)?;
            transcript = Some(t);
            model = Some((m, Some(scalers[i].clone())));
        }
        Arm::Centralized => {
            let parts: Vec<&MaskedMatrix<f64>> = train_std.iter().collect();
            let pooled = MaskedMatrix::vstack(&parts)?;
            let (m, t) = run_centralized(pooled, &miwae_plan(cfg, run, AggregatorKind::FedAvg), &miwae_cfg, run.n_train)?;
            transcript = Some(t);
            model = Some((m, Some(reference.clone())));
        }
        Arm::Mean | Arm::MeanLoc | Arm::Ice => {}
    }

    let ice = if arm == Arm::Ice {
        let parts: Vec<&MaskedMatrix<f64>> = train_std.iter().collect();
        Some(ice_fit(&MaskedMatrix::vstack(&parts)?, &cfg.ice)?)
    } else {
        None
    };
    let pooled_train = if arm == Arm::Mean {
        let parts: Vec<&MaskedMatrix<f64>> = train_std.iter().collect();
        Some(MaskedMatrix::vstack(&parts)?)
    } else {
        None
    };

    let mut scores = Vec::with_capacity(run.datasets.len());
    for (d, ds) in run.datasets.iter().enumerate() {
        let x = &standardized[d];
        let imputed = match (arm, &model) {
            (_, Some((m, _))) => impute_dataset(m, x, miwae_cfg.l_test, derive_seed(run.seed, &[IMPUTE, d as u64]))?,
            (Arm::Mean, _) => mean_fit_impute(pooled_train.as_ref().expect("pooled"), x)?,
            (Arm::MeanLoc, _) => mean_fit_impute(x, x)?,
            (Arm::Ice, _) => ice.as_ref().expect("fitted").transform(x)?,
            _ => unreachable!("MIWAE arms always carry a model"),
        };
        let imputed = standardize(&scalers[d].invert(&imputed)?, &reference);
        let truth = standardize(&ds.truth, &reference);
        scores.push((ds.name.clone(), normalized_mse(&imputed, &truth, &ds.scored, cfg.eval.normalization)?));
    }

    let mi_arms: Vec<Arm> = cfg.eval.mi_arms.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let uncertainty = match &model {
        Some((m, _)) if mi_arms.contains(&arm) => {
            let l = if cfg.eval.mi_candidates == 0 { miwae_cfg.l_test } else { cfg.eval.mi_candidates };
            Some(mi_uncertainty(m, &standardized[run.n_train], l, cfg.eval.mi_draws, derive_seed(run.seed, &[MI]))?)
        }
        _ => None,
    };
    Ok(ArmOutcome { scores, model, transcript, uncertainty })
}

fn create_dirs(out: &Path) -> Result<()> {
    for sub in ["tables", "plotdata", "models"] {
        fs::create_dir_all(out.join(sub))?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs every configured arm on every run and writes `report.json`,
/// `tables/`, `plotdata/`, `models/` and `transcript.jsonl` under the output
/// directory. Arm failures are recorded and the remaining arms still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ImputationReport> {
    run_experiment_with(cfg, &mut |_| {})
}

/// As [`run_experiment`], reporting progress lines to `progress`.
pub fn run_experiment_with(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ImputationReport> {
    cfg.validate()?;
    let arms = cfg.resolved_arms()?;
    let out = cfg.output_dir.clone();
    create_dirs(&out)?;
    let runs = prepare_runs(cfg)?;
    let n_train = runs.first().map_or(0, |r| r.n_train);

    let mut transcript_out = if cfg.eval.save_transcripts { Some(BufWriter::new(File::create(out.join("transcript.jsonl"))?)) } else { None };
    let mut rounds_out = csv::Writer::from_writer(BufWriter::new(File::create(out.join("tables").join("round_metrics.csv"))?));
    rounds_out.write_record(["run", "round", "client", "mean_loss", "n"])?;

    let mut scores = Vec::new();
    let mut mi = Vec::new();
    let mut failures = Vec::new();
    for run in &runs {
        for &arm in &arms {
            let label = run.label(arm);
            progress(&format!("running {label}"));
            match run_arm(cfg, run, arm) {
                Ok(outcome) => {
                    for (dataset, mse) in outcome.scores {
                        scores.push(RunScore { repetition: run.repetition, fold: run.fold, arm: arm.to_string(), dataset, mse });
                    }
                    if let Some(t) = &outcome.transcript {
                        if let Some(w) = transcript_out.as_mut() {
                            t.write_jsonl(&label, w)?;
                        }
                        for m in t.round_metrics() {
                            rounds_out.write_record([label.clone(), m.round.to_string(), m.client.to_string(), m.mean_loss.to_string(), m.n.to_string()])?;
                        }
                    }
                    if let (true, Some((model, scaler))) = (cfg.eval.save_models, &outcome.model) {
                        let name = format!("{arm}_r{}_f{}.bin", run.repetition, run.fold);
                        save_model(&out.join("models").join(name), model, scaler.as_ref())?;
                    }
                    if let Some(table) = outcome.uncertainty {
                        mi.push(MiRecord { repetition: run.repetition, fold: run.fold, arm: arm.to_string(), dataset: "test".into(), table });
                    }
                }
                Err(e) => {
                    progress(&format!("{label} failed: {e}"));
                    failures.push(Failure { repetition: run.repetition, fold: run.fold, arm: arm.to_string(), message: e.to_string() });
                }
            }
        }
    }
    rounds_out.flush()?;
    if let Some(mut w) = transcript_out {
        w.flush()?;
    }

    let arm_names: Vec<String> = arms.iter().map(Arm::to_string).collect();
    let datasets = dataset_names(n_train);
    let cells = ImputationReport::summarize(&arm_names, &datasets, &scores);
    let report = ImputationReport {
        normalization: cfg.eval.normalization,
        arms: arm_names,
        datasets,
        cells,
        runs: scores,
        multiple_imputation: mi,
        external: BTreeMap::from([("rf".to_string(), None)]),
        failures,
        provenance: Provenance {
            config_hash: cfg.hash()?,
            master_seed: cfg.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            run_seeds: runs.iter().map(|r| RunSeed { repetition: r.repetition, fold: r.fold, seed: r.seed }).collect(),
        },
    };
    fs::write(out.join("report.json"), report.to_json()?)?;
    write_file(&out.join("tables").join("mse_summary.csv"), |w| report.write_summary_csv(w))?;
    write_file(&out.join("tables").join("mse_runs.csv"), |w| report.write_runs_csv(w))?;
    write_file(&out.join("tables").join("mi_summary.csv"), |w| report.write_mi_summary_csv(w))?;
    write_file(&out.join("plotdata").join("mse_distribution.csv"), |w| report.write_runs_csv(w))?;
    write_file(&out.join("plotdata").join("mi_spread.csv"), |w| report.write_mi_spread_csv(w))?;
    Ok(report)
}

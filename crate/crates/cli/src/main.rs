use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedimpute::datasets::{generate_scenario, load_csv, save_csv, GenSpec, DEFAULT_MISSING_TOKENS};
use fedimpute::eval::{normalized_mse, run_experiment_with, ExperimentConfig, Normalization};
use fedimpute::fedstd::{apply_scaler, local_scaler};
use fedimpute::miwae::{impute_dataset, impute_multiple, load_model};
use fedimpute::missingness::read_mask_csv;
use fedimpute::numcore::Matrix;
use fedimpute::rng::stream;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedimpute", version, about = "Federated MIWAE imputation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress progress lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Impute a CSV with a saved model.
    Impute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `m` posterior draws per row instead of one conditional mean.
        #[arg(long)]
        multiple: Option<usize>,
        /// Latent candidates per row; defaults to the model's `l_test`.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long, env = "FEDIMPUTE_SEED", default_value_t = 0)]
        seed: u64,
        /// Extra cell token treated as missing (empty and NA always are).
        #[arg(long)]
        missing_token: Option<String>,
    },
    /// Generate a synthetic scenario from a TOML spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "fedimpute-data")]
        out: PathBuf,
    },
    /// Normalized MSE of an imputed CSV against the truth on masked cells.
    Score {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        imputed: PathBuf,
        /// 0/1 CSV; cells marked 0 are scored.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_parser = parse_normalization, default_value = "global")]
        normalization: Normalization,
    },
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "global" => Ok(Normalization::Global),
        "per_feature" => Ok(Normalization::PerFeature),
        "none" => Ok(Normalization::None),
        other => Err(format!("unknown normalization {other:?} (global, per_feature, none)")),
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, quiet: bool) -> Result<ExitCode> {
    let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    cfg.apply_env()?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let report = run_experiment_with(&cfg, &mut |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    println!("{:<14} {:<10} {:>10} {:>10}", "arm", "dataset", "mean", "std");
    for c in &report.cells {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<14} {:<10} {:>10} {:>10}", c.arm, c.dataset, fmt(c.mean), fmt(c.std));
    }
    println!("report: {}", cfg.output_dir.join("report.json").display());
    if report.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &report.failures {
            eprintln!("failed: {} r{} f{}: {}", f.arm, f.repetition, f.fold, f.message);
        }
        Ok(ExitCode::FAILURE)
    }
}

// Unscaling is not bit-exact; observed cells are written back as read.
fn restore_observed(out: &mut [f64], input: &[f64], observed: &[bool]) {
    for ((o, &x), &seen) in out.iter_mut().zip(input).zip(observed) {
        if seen {
            *o = x;
        }
    }
}

fn impute(model: PathBuf, data: PathBuf, out: PathBuf, multiple: Option<usize>, candidates: Option<usize>, seed: u64, token: Option<String>) -> Result<()> {
    let (model, scaler) = load_model::<f64>(&model)?;
    let mut tokens: Vec<&str> = DEFAULT_MISSING_TOKENS.to_vec();
    if let Some(t) = token.as_deref() {
        tokens.push(t);
    }
    let table = load_csv(&data, &tokens)?;
    if let Some(i) = table.data.mask().first_empty_row() {
        bail!("row {} of {} has no observed values", i + 1, data.display());
    }
    let scaler = match scaler {
        Some(s) => s,
        None => local_scaler(&table.data)?,
    };
    let std = apply_scaler(&table.data, &scaler)?;
    let l = candidates.unwrap_or(model.config().l_test);
    match multiple {
        None => {
            let mut imputed = scaler.invert(&impute_dataset(&model, &std, l, seed)?)?;
            for i in 0..imputed.rows() {
                restore_observed(imputed.row_mut(i), table.data.values().row(i), table.data.mask().row(i));
            }
            save_csv(&out, &table.header, &imputed, None, "")?;
        }
        Some(m) => {
            let p = std.cols();
            let mut cells = Vec::with_capacity(std.rows() * m * (p + 2));
            for i in 0..std.rows() {
                let mut rng = stream(seed, &[i as u64]);
                let draws = impute_multiple(&model, std.values().row(i), std.mask().row(i), l, m, &mut rng)?;
                let mut original = scaler.invert(&draws.completions)?;
                for k in 0..m {
                    restore_observed(original.row_mut(k), table.data.values().row(i), table.data.mask().row(i));
                    cells.push(i as f64);
                    cells.push(k as f64);
                    cells.extend_from_slice(original.row(k));
                }
            }
            let mut header = vec!["row".to_string(), "draw".to_string()];
            header.extend(table.header.iter().cloned());
            save_csv(&out, &header, &Matrix::from_vec(std.rows() * m, p + 2, cells)?, None, "")?;
        }
    }
    Ok(())
}

fn gen(spec: PathBuf, out: PathBuf) -> Result<()> {
    let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
    let manifest = generate_scenario(&GenSpec::from_toml(&text)?, &out)?;
    for f in &manifest.files {
        println!("{:<8} {:<12} {:>5} rows  {}", f.role, f.name, f.rows, out.join(&f.path).display());
    }
    Ok(())
}

fn score(truth: PathBuf, imputed: PathBuf, mask: PathBuf, how: Normalization) -> Result<()> {
    let t = load_csv(&truth, &DEFAULT_MISSING_TOKENS)?;
    let x = load_csv(&imputed, &DEFAULT_MISSING_TOKENS)?;
    let m = read_mask_csv(fs::File::open(&mask).with_context(|| format!("opening {}", mask.display()))?)?;
    if t.data.mask().missing_count() > 0 || x.data.mask().missing_count() > 0 {
        bail!("truth and imputed tables must be complete");
    }
    if t.header != x.header {
        eprintln!("warning: truth and imputed headers differ");
    }
    let v = normalized_mse(x.data.values(), t.data.values(), &m, how)?;
    println!("{v}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, quiet } => run(config, out, quiet),
        Command::Impute { model, data, out, multiple, candidates, seed, missing_token } => {
            impute(model, data, out, multiple, candidates, seed, missing_token).map(|_| ExitCode::SUCCESS)
        }
        Command::Gen { spec, out } => gen(spec, out).map(|_| ExitCode::SUCCESS),
        Command::Score { truth, imputed, mask, normalization } => score(truth, imputed, mask, normalization).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use super::metrics::Normalization;
use super::uncertainty::UncertaintyTable;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// One arm × dataset cell aggregated over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub dataset: String,
    /// Runs that produced a score.
    pub n_runs: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; present whenever `n_runs > 1`.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub repetition: usize,
    pub fold: usize,
    pub arm: String,
    pub dataset: String,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    pub repetition: usize,
    pub fold: usize,
    pub arm: String,
    pub dataset: String,
    pub table: UncertaintyTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub repetition: usize,
    pub fold: usize,
    pub arm: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeed {
    pub repetition: usize,
    pub fold: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub crate_version: String,
    pub run_seeds: Vec<RunSeed>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub normalization: Normalization,
    pub arms: Vec<String>,
    pub datasets: Vec<String>,
    pub cells: Vec<Cell>,
    pub runs: Vec<RunScore>,
    pub multiple_imputation: Vec<MiRecord>,
    /// Slots for scores computed outside this tool, e.g. `rf`; always null here.
    pub external: BTreeMap<String, Option<Vec<Cell>>>,
    pub failures: Vec<Failure>,
    pub provenance: Provenance,
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

impl ImputationReport {
    /// Builds every arm × dataset cell from the per-run scores.
    pub fn summarize(arms: &[String], datasets: &[String], runs: &[RunScore]) -> Vec<Cell> {
        let mut cells = Vec::with_capacity(arms.len() * datasets.len());
        for arm in arms {
            for ds in datasets {
                let xs: Vec<f64> = runs.iter().filter(|r| &r.arm == arm && &r.dataset == ds).map(|r| r.mse).collect();
                let mean = (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
                cells.push(Cell { arm: arm.clone(), dataset: ds.clone(), n_runs: xs.len(), mean, std: sample_std(&xs) });
            }
        }
        cells
    }

    pub fn cell(&self, arm: &str, dataset: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.arm == arm && c.dataset == dataset)
    }

    /// Score of one run, if it succeeded.
    pub fn score(&self, repetition: usize, fold: usize, arm: &str, dataset: &str) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.repetition == repetition && r.fold == fold && r.arm == arm && r.dataset == dataset)
            .map(|r| r.mse)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["arm", "dataset", "n_runs", "mean", "std"])?;
        for c in &self.cells {
            out.write_record([
                c.arm.clone(),
                c.dataset.clone(),
                c.n_runs.to_string(),
                c.mean.map_or(String::new(), |v| v.to_string()),
                c.std.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["repetition", "fold", "arm", "dataset", "mse"])?;
        for r in &self.runs {
            out.write_record([r.repetition.to_string(), r.fold.to_string(), r.arm.clone(), r.dataset.clone(), r.mse.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_mi_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "repetition",
            "fold",
            "arm",
            "dataset",
            "draws",
            "median_posterior_std",
            "median_prior_std",
            "observed_constant",
            "degenerate",
        ])?;
        for m in &self.multiple_imputation {
            let t = &m.table;
            out.write_record([
                m.repetition.to_string(),
                m.fold.to_string(),
                m.arm.clone(),
                m.dataset.clone(),
                t.draws.to_string(),
                t.median_posterior_std.to_string(),
                t.median_prior_std.to_string(),
                t.observed_constant.to_string(),
                t.degenerate.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Per-feature spreads, one line per (run, arm, feature).
    pub fn write_mi_spread_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["repetition", "fold", "arm", "dataset", "feature", "cells", "posterior_std", "prior_std"])?;
        for m in &self.multiple_imputation {
            for f in &m.table.per_feature {
                out.write_record([
                    m.repetition.to_string(),
                    m.fold.to_string(),
                    m.arm.clone(),
                    m.dataset.clone(),
                    f.feature.to_string(),
                    f.cells.to_string(),
                    f.posterior_std.to_string(),
                    f.prior_std.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(rep: usize, arm: &str, ds: &str, mse: f64) -> RunScore {
        RunScore { repetition: rep, fold: 0, arm: arm.into(), dataset: ds.into(), mse }
    }

    #[test]
    fn cells_cover_every_pair_and_report_std() {
        let runs = vec![run(0, "mean", "test", 1.0), run(1, "mean", "test", 3.0), run(0, "mean", "client_1", 2.0)];
        let arms = vec!["mean".to_string(), "ice".to_string()];
        let ds = vec!["client_1".to_string(), "test".to_string()];
        let cells = ImputationReport::summarize(&arms, &ds, &runs);
        assert_eq!(cells.len(), 4);
        let t = cells.iter().find(|c| c.arm == "mean" && c.dataset == "test").unwrap();
        assert_eq!(t.mean, Some(2.0));
        assert!((t.std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let c1 = cells.iter().find(|c| c.arm == "mean" && c.dataset == "client_1").unwrap();
        assert_eq!((c1.n_runs, c1.std), (1, None));
        assert!(cells.iter().any(|c| c.arm == "ice" && c.n_runs == 0 && c.mean.is_none()));
    }
}

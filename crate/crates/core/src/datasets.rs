//! Synthetic data shaped like the benchmark cohort, scenario splits,
//! the repetition harness and CSV input/output.

use crate::error::{Error, Result};
use crate::masked::{Mask, MaskedMatrix};
use crate::numcore::Matrix;
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Low-rank Gaussian factor model with classes shifted along one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub latent_rank: usize,
    pub n_classes: usize,
    /// Rows per class; must sum to `n_samples`.
    pub class_sizes: Vec<usize>,
    /// Distance between the outermost class means.
    pub shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 311,
            n_features: 130,
            latent_rank: 8,
            n_classes: 2,
            class_sizes: vec![207, 104],
            shift: 8.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_sizes.len() != self.n_classes || self.n_classes == 0 {
            return Err(Error::Config(format!("{} class sizes for {} classes", self.class_sizes.len(), self.n_classes)));
        }
        if self.class_sizes.iter().sum::<usize>() != self.n_samples {
            return Err(Error::Config(format!("class sizes {:?} do not sum to {}", self.class_sizes, self.n_samples)));
        }
        if self.latent_rank == 0 || self.latent_rank >= self.n_features {
            return Err(Error::Config(format!("latent rank {} must lie in [1, {})", self.latent_rank, self.n_features)));
        }
        if !(self.noise >= 0.0) || !self.shift.is_finite() {
            return Err(Error::Config("noise must be >= 0 and shift finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub values: Matrix<f64>,
    pub labels: Vec<usize>,
    /// Factor loadings, `n_features x latent_rank`.
    pub loadings: Matrix<f64>,
    /// Per-class mean vectors.
    pub class_means: Vec<Vec<f64>>,
}

/// Draws loadings N(0,1)/sqrt(rank) from the spec seed and generates data.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[0]);
    let scale = 1.0 / (spec.latent_rank as f64).sqrt();
    let loadings = Matrix::from_fn(spec.n_features, spec.latent_rank, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    gen_synthetic_with(spec, loadings)
}

/// Generates `x_i = class_mean + A u_i + noise` with the given loadings `A`.
pub fn gen_synthetic_with(spec: &SyntheticSpec, loadings: Matrix<f64>) -> Result<SyntheticData> {
    spec.validate()?;
    let (p, r) = (spec.n_features, spec.latent_rank);
    if loadings.shape() != (p, r) {
        return Err(Error::Dimension(format!("loadings {}x{}, expected {p}x{r}", loadings.rows(), loadings.cols())));
    }
    let mut rng = stream(spec.seed, &[1]);
    let mut dir: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let c = spec.n_classes;
    let class_means: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let t = if c == 1 { 0.0 } else { k as f64 / (c - 1) as f64 - 0.5 };
            dir.iter().map(|d| spec.shift * t * d).collect()
        })
        .collect();

    let mut labels: Vec<usize> = spec.class_sizes.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat(k).take(n)).collect();
    labels.shuffle(&mut rng);
    let mut values = Matrix::zeros(spec.n_samples, p);
    let mut u = vec![0.0; r];
    for (i, &label) in labels.iter().enumerate() {
        u.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let row = values.row_mut(i);
        for j in 0..p {
            let factor: f64 = loadings.row(j).iter().zip(&u).map(|(a, b)| a * b).sum();
            let eps = if spec.noise > 0.0 { spec.noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            row[j] = class_means[label][j] + factor + eps;
        }
    }
    Ok(SyntheticData { values, labels, loadings, class_means })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Natural,
    #[default]
    Noniid,
}

/// Row indices of each client and of the held-out test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSplit {
    pub scenario: Scenario,
    pub clients: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Natural scenario: client sizes (one client is held out per fold).
    pub natural_sizes: Vec<usize>,
    /// Non-IID scenario: rows of class 0 in client 1, rows of class 1 in
    /// client 2; everything else is the mixed test set.
    pub noniid_sizes: [usize; 2],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { natural_sizes: vec![92, 104, 62, 53], noniid_sizes: [171, 77] }
    }
}

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Stratified random partition of all rows into groups of `sizes`.
pub fn split_natural(labels: &[usize], sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if sizes.iter().sum::<usize>() != n || sizes.is_empty() {
        return Err(Error::Config(format!("client sizes {sizes:?} do not cover {n} rows")));
    }
    let mut rng = stream(seed, &[]);
    let mut classes = by_class(labels);
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    // Merge classes by relative position within each shuffled class.
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(n);
    for (k, rows) in classes.iter().enumerate() {
        for (pos, _) in rows.iter().enumerate() {
            order.push((k, pos));
        }
    }
    order.sort_by(|a, b| {
        let fa = (a.1 as f64 + 0.5) / classes[a.0].len() as f64;
        let fb = (b.1 as f64 + 0.5) / classes[b.0].len() as f64;
        fa.total_cmp(&fb).then(a.0.cmp(&b.0))
    });
    // Any contiguous block of the interleaved order carries the global class
    // proportions up to rounding.
    let mut rest = order.iter().map(|&(k, pos)| classes[k][pos]);
    let mut groups: Vec<Vec<usize>> = sizes.iter().map(|&s| rest.by_ref().take(s).collect()).collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

/// Client 1 holds only class 0, client 2 only class 1; the rest is a mixed
/// test set.
pub fn split_noniid(labels: &[usize], sizes: [usize; 2], seed: u64) -> Result<ScenarioSplit> {
    let mut classes = by_class(labels);
    if classes.len() < 2 || classes[0].len() < sizes[0] || classes[1].len() < sizes[1] {
        let have: Vec<usize> = classes.iter().map(Vec::len).collect();
        return Err(Error::Config(format!("non-IID split needs {sizes:?} rows of classes 0/1, have {have:?}")));
    }
    let mut rng = stream(seed, &[]);
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    let mut a = classes[0][..sizes[0]].to_vec();
    let mut b = classes[1][..sizes[1]].to_vec();
    let mut test: Vec<usize> = classes[0][sizes[0]..].iter().chain(&classes[1][sizes[1]..]).copied().collect();
    for c in classes.iter().skip(2) {
        test.extend(c);
    }
    a.sort_unstable();
    b.sort_unstable();
    test.sort_unstable();
    Ok(ScenarioSplit { scenario: Scenario::Noniid, clients: vec![a, b], test })
}

/// One train/test assignment of the repetition harness.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalRun {
    pub repetition: usize,
    /// Held-out client index in natural mode; 0 in non-IID mode.
    pub fold: usize,
    pub split: ScenarioSplit,
    /// Seed for everything downstream of the split in this run.
    pub seed: u64,
}

/// Natural: `repetitions` x `#clients` folds rotating the held-out client.
/// Non-IID: `repetitions` runs with fixed roles and fresh draws.
pub fn crossval_runs(scenario: Scenario, labels: &[usize], split: &SplitSpec, repetitions: usize, seed: u64) -> Result<Vec<CrossvalRun>> {
    let mut runs = Vec::new();
    for rep in 0..repetitions {
        let split_seed = crate::rng::derive_seed(seed, &[rep as u64, 0]);
        match scenario {
            Scenario::Natural => {
                let groups = split_natural(labels, &split.natural_sizes, split_seed)?;
                for fold in 0..groups.len() {
                    let clients = groups.iter().enumerate().filter(|&(g, _)| g != fold).map(|(_, v)| v.clone()).collect();
                    runs.push(CrossvalRun {
                        repetition: rep,
                        fold,
                        split: ScenarioSplit { scenario, clients, test: groups[fold].clone() },
                        seed: crate::rng::derive_seed(seed, &[rep as u64, 1, fold as u64]),
                    });
                }
            }
            Scenario::Noniid => runs.push(CrossvalRun {
                repetition: rep,
                fold: 0,
                split: split_noniid(labels, split.noniid_sizes, split_seed)?,
                seed: crate::rng::derive_seed(seed, &[rep as u64, 1, 0]),
            }),
        }
    }
    Ok(runs)
}

/// Tokens treated as missing when none are configured.
pub const DEFAULT_MISSING_TOKENS: [&str; 2] = ["", "NA"];

/// A loaded table: column names and the masked values.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub data: MaskedMatrix<f64>,
}

/// Parses a rectangular numeric CSV with a header row.
pub fn read_csv<R: Read>(r: R, missing: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let p = header.len();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != p {
            return Err(Error::Ingestion { row, col: rec.len().min(p), msg: format!("{} fields, header has {p}", rec.len()) });
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if missing.contains(&cell) {
                values.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Ingestion { row, col: j, msg: format!("cannot parse {cell:?} as a number") })?;
                if !v.is_finite() {
                    return Err(Error::Ingestion { row, col: j, msg: format!("non-finite value {cell:?}") });
                }
                values.push(v);
                observed.push(true);
            }
        }
        n += 1;
    }
    let mask = Mask::from_vec(n, p, observed)?;
    Ok(Table { header, data: MaskedMatrix::new(Matrix::from_vec(n, p, values)?, mask)? })
}

/// Reads a CSV file; see [`read_csv`].
pub fn load_csv(path: &Path, missing: &[&str]) -> Result<Table> {
    read_csv(std::fs::File::open(path)?, missing)
}

/// Writes values (shortest round-trip formatting) with missing cells as
/// `missing_token`.
pub fn write_csv<W: Write>(w: W, header: &[String], values: &Matrix<f64>, mask: Option<&Mask>, missing_token: &str) -> Result<()> {
    if header.len() != values.cols() {
        return Err(Error::Dimension(format!("{} header names for {} columns", header.len(), values.cols())));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    let mut rec = Vec::with_capacity(values.cols());
    for i in 0..values.rows() {
        rec.clear();
        for j in 0..values.cols() {
            let observed = mask.map_or(true, |m| m.is_observed(i, j));
            rec.push(if observed { format!("{}", values.get(i, j)) } else { missing_token.to_string() });
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, header: &[String], values: &Matrix<f64>, mask: Option<&Mask>, missing_token: &str) -> Result<()> {
    write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), header, values, mask, missing_token)
}

/// Default column names `f0, f1, ...`.
pub fn feature_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("f{j}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// `client`, `test` or `full`.
    pub role: String,
    pub name: String,
    pub path: String,
    pub rows: usize,
}

/// Lists the files of a generated scenario and their roles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: Option<Scenario>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything `gen` needs: the generator, the split and optional masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub scenario: Scenario,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    /// When present, each part is also written with simulated missingness.
    pub mask: Option<crate::missingness::MaskSpec>,
}

impl GenSpec {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Writes the full table, labels, every scenario part (complete and, with a
/// mask spec, masked plus its 0/1 mask) and `manifest.toml` into `dir`.
pub fn generate_scenario(spec: &GenSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let data = gen_synthetic(&spec.synthetic)?;
    let header = feature_names(spec.synthetic.n_features);
    let mut files = Vec::new();
    let mut entry = |role: &str, name: String, rows: usize| {
        files.push(ManifestEntry { role: role.into(), path: format!("{name}.csv"), name, rows });
    };
    save_csv(&dir.join("full.csv"), &header, &data.values, None, "")?;
    entry("full", "full".into(), data.values.rows());
    let labels = Matrix::from_vec(data.labels.len(), 1, data.labels.iter().map(|&l| l as f64).collect())?;
    save_csv(&dir.join("labels.csv"), &["label".to_string()], &labels, None, "")?;
    entry("labels", "labels".into(), labels.rows());

    let run = crossval_runs(spec.scenario, &data.labels, &spec.split, 1, spec.synthetic.seed)?.remove(0);
    let mut parts: Vec<(&str, String, &Vec<usize>)> =
        run.split.clients.iter().enumerate().map(|(i, rows)| ("client", format!("client_{}", i + 1), rows)).collect();
    let held_out = match spec.scenario {
        Scenario::Natural => format!("client_{}", run.split.clients.len() + 1),
        Scenario::Noniid => "test".to_string(),
    };
    let test_role = if spec.scenario == Scenario::Natural { "client" } else { "test" };
    parts.push((test_role, held_out, &run.split.test));
    for (d, (role, name, rows)) in parts.into_iter().enumerate() {
        let truth = data.values.select_rows(rows);
        if let Some(ms) = &spec.mask {
            let mask = crate::missingness::simulate_mask(&truth, ms, &mut stream(run.seed, &[d as u64]))?;
            save_csv(&dir.join(format!("{name}.csv")), &header, &truth, Some(&mask), "NA")?;
            save_csv(&dir.join(format!("{name}_truth.csv")), &header, &truth, None, "")?;
            let w = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}_mask.csv")))?);
            crate::missingness::write_mask_csv(&mask, &header, w)?;
        } else {
            save_csv(&dir.join(format!("{name}.csv")), &header, &truth, None, "")?;
        }
        entry(role, name, rows.len());
    }
    let manifest = Manifest { scenario: Some(spec.scenario), files };
    std::fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_noiseless_rows_are_constant_up_to_shift() {
        let spec = SyntheticSpec { n_samples: 20, n_features: 6, latent_rank: 1, class_sizes: vec![12, 8], noise: 0.0, ..Default::default() };
        let d = gen_synthetic_with(&spec, Matrix::filled(6, 1, 1.0)).unwrap();
        for i in 0..20 {
            let mean = &d.class_means[d.labels[i]];
            let u: Vec<f64> = (0..6).map(|j| d.values.get(i, j) - mean[j]).collect();
            assert!(u.iter().all(|v| (v - u[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn class_sizes_and_shift_match_spec() {
        let spec = SyntheticSpec::default();
        let d = gen_synthetic(&spec).unwrap();
        assert_eq!(d.values.shape(), (311, 130));
        assert_eq!(d.labels.iter().filter(|&&l| l == 0).count(), 207);
        let gap: f64 = d.class_means[1].iter().zip(&d.class_means[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((gap - 8.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SyntheticSpec { seed: 4, ..Default::default() };
        assert_eq!(gen_synthetic(&spec).unwrap().values, gen_synthetic(&spec).unwrap().values);
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        let bad = SyntheticSpec { class_sizes: vec![200, 100], ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SyntheticSpec { latent_rank: 130, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn natural_split_has_exact_sizes() {
        let d = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let groups = split_natural(&d.labels, &[92, 104, 62, 53], 1).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![92, 104, 62, 53]);
        assert!(split_natural(&d.labels, &[92, 104, 62, 52], 1).is_err());
    }

    #[test]
    fn noniid_roles_hold() {
        let d = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let s = split_noniid(&d.labels, [171, 77], 3).unwrap();
        assert!(s.clients[0].iter().all(|&i| d.labels[i] == 0));
        assert!(s.clients[1].iter().all(|&i| d.labels[i] == 1));
        assert_eq!(s.test.len(), 63);
        assert!(split_noniid(&d.labels, [208, 77], 3).is_err());
    }

    #[test]
    fn crossval_counts() {
        let d = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let natural = crossval_runs(Scenario::Natural, &d.labels, &SplitSpec::default(), 5, 0).unwrap();
        assert_eq!(natural.len(), 20);
        let noniid = crossval_runs(Scenario::Noniid, &d.labels, &SplitSpec::default(), 5, 0).unwrap();
        assert_eq!(noniid.len(), 5);
    }

    #[test]
    fn csv_with_one_na() {
        let t = read_csv("a,b\n1,2\nNA,4\n5,6\n".as_bytes(), &DEFAULT_MISSING_TOKENS).unwrap();
        assert_eq!(t.data.mask().missing_count(), 1);
        assert!(!t.data.mask().is_observed(1, 0));
        assert_eq!(t.header, vec!["a", "b"]);
    }

    #[test]
    fn csv_errors_carry_positions() {
        let err = read_csv("a,b\n1,2\n3\n".as_bytes(), &DEFAULT_MISSING_TOKENS).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 2, .. }));
        let err = read_csv("a,b\n1,x\n".as_bytes(), &DEFAULT_MISSING_TOKENS).unwrap_err();
        assert!(matches!(err, Error::Ingestion { row: 1, col: 1, .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            scenario: Some(Scenario::Noniid),
            files: vec![ManifestEntry { role: "client".into(), name: "client_1".into(), path: "c1.csv".into(), rows: 171 }],
        };
        assert_eq!(Manifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
    }
}

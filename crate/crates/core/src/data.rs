//! Dataset ingestion, Monte-Carlo splitting and standardization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: row {row}, column {col}: {message}")]
    Parse { path: String, row: usize, col: usize, message: String },
    #[error("{path}: file contains no data rows")]
    EmptyFile { path: String },
    #[error("dataset needs at least 2 rows and 1 feature column, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("split ratio {ratio} leaves an empty partition for n={n}")]
    EmptyPartition { ratio: f64, n: usize },
    #[error("unknown synthetic generator '{0}'")]
    UnknownGenerator(String),
    #[error("unknown dataset '{0}' (not a file, registry entry or synthetic:<id>)")]
    UnknownDataset(String),
    #[error("registry {path}: {message}")]
    Registry { path: String, message: String },
}

/// Feature matrix (stored column-major) plus target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub provenance: String,
    columns: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        provenance: impl Into<String>,
        columns: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self, DataError> {
        let n = targets.len();
        if n < 2 || columns.is_empty() || columns.iter().any(|c| c.len() != n) {
            return Err(DataError::TooSmall { rows: n, cols: columns.len() });
        }
        Ok(Dataset { name: name.into(), provenance: provenance.into(), columns, targets })
    }

    /// Rows as `features..., target`.
    pub fn from_rows(name: &str, provenance: &str, rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if width < 2 {
            return Err(DataError::TooSmall { rows: rows.len(), cols: width.saturating_sub(1) });
        }
        let d = width - 1;
        let mut columns = vec![Vec::with_capacity(rows.len()); d];
        let mut targets = Vec::with_capacity(rows.len());
        for row in rows {
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(*v);
            }
            targets.push(row[d]);
        }
        Dataset::new(name, provenance, columns, targets)
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn select(&self, rows: &[usize], suffix: &str) -> Dataset {
        Dataset {
            name: format!("{}{}", self.name, suffix),
            provenance: self.provenance.clone(),
            columns: self.columns.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
        }
    }
}

/// Where the standardization statistics are estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardizeScope {
    /// Fit on the training partition only and apply to both partitions.
    #[default]
    Train,
    /// Fit on all rows (train and test together).
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    fn fit<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Self {
        let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        let mean = sum / count as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        ColumnStats { mean, std: var.sqrt() }
    }

    fn apply(&self, v: f64) -> f64 {
        if self.std > 0.0 {
            (v - self.mean) / self.std
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub features: Vec<ColumnStats>,
    pub target: ColumnStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub scope: StandardizeScope,
    /// Statistics of the most recent standardization pass.
    pub standardization: Option<Standardization>,
}

/// Train size for a given ratio, ties rounded half up.
pub fn train_size(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Uniform random partition without replacement, then standardization.
pub fn monte_carlo_split<R: Rng + ?Sized>(
    ds: &Dataset,
    ratio: f64,
    scope: StandardizeScope,
    rng: &mut R,
) -> Result<SplitDataset, DataError> {
    let n = ds.n_rows();
    let n_train = train_size(n, ratio);
    if !(ratio > 0.0 && ratio < 1.0) || n_train == 0 || n_train >= n {
        return Err(DataError::EmptyPartition { ratio, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut train_rows = idx[..n_train].to_vec();
    let mut test_rows = idx[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    let split = SplitDataset {
        train: ds.select(&train_rows, "/train"),
        test: ds.select(&test_rows, "/test"),
        train_rows,
        test_rows,
        scope,
        standardization: None,
    };
    Ok(standardize(split))
}

/// `(x - mean) / std` per column and for the target; zero-variance columns map to 0.
pub fn standardize(mut split: SplitDataset) -> SplitDataset {
    let stats_for = |train: &[f64], test: &[f64]| match split.scope {
        StandardizeScope::Train => ColumnStats::fit(train.iter()),
        StandardizeScope::Full => ColumnStats::fit(train.iter().chain(test.iter())),
    };
    let features: Vec<ColumnStats> =
        split.train.columns.iter().zip(&split.test.columns).map(|(a, b)| stats_for(a, b)).collect();
    let target = stats_for(&split.train.targets, &split.test.targets);
    for part in [&mut split.train, &mut split.test] {
        for (col, st) in part.columns.iter_mut().zip(&features) {
            col.iter_mut().for_each(|v| *v = st.apply(*v));
        }
        part.targets.iter_mut().for_each(|v| *v = target.apply(*v));
    }
    split.standardization = Some(Standardization { features, target });
    split
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Load a numeric CSV whose last column is the target. A non-numeric first
/// row is treated as a header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_csv(&text, &name, &path.display().to_string())
}

pub fn parse_csv(text: &str, name: &str, path: &str) -> Result<Dataset, DataError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| DataError::Parse {
            path: path.to_string(),
            row: line,
            col: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(|c| c.parse::<f64>()).collect();
        if line == 1 && parsed.iter().any(|p| p.is_err()) {
            width = Some(record.len());
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(DataError::Parse {
                path: path.to_string(),
                row: line,
                col: record.len().min(w) + 1,
                message: format!("expected {w} columns, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (j, (cell, p)) in record.iter().zip(parsed).enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(DataError::Parse {
                        path: path.to_string(),
                        row: line,
                        col: j + 1,
                        message: format!("non-numeric cell '{cell}'"),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile { path: path.to_string() });
    }
    Dataset::from_rows(name, path, &rows)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (0..ds.n_features()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.columns.iter().map(|c| c[r].to_string()).collect();
        rec.push(ds.targets[r].to_string());
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub const GENERATORS: [&str; 3] = ["poly3", "rational", "friedman"];

/// Reproducible synthetic regression problems.
///
/// * `poly3`: 2 features in [-1, 1], `y = x0^3 + x1`.
/// * `rational`: 2 features in [-1, 1], `y = x0 / (1 + x1^2)`.
/// * `friedman`: 7 features in [0, 1], Friedman #1 on the first five
///   (`10 sin(pi x0 x1) + 20 (x2 - 0.5)^2 + 10 x3 + 5 x4`), two distractors.
///
/// `noise` is the standard deviation of additive Gaussian noise.
pub fn synthetic_dataset<R: Rng + ?Sized>(
    generator: &str,
    n: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Dataset, DataError> {
    let (d, lo, hi): (usize, f64, f64) = match generator {
        "poly3" | "rational" => (2, -1.0, 1.0),
        "friedman" => (7, 0.0, 1.0),
        other => return Err(DataError::UnknownGenerator(other.to_string())),
    };
    let mut columns = vec![Vec::with_capacity(n); d];
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(lo..hi)).collect();
        let y = match generator {
            "poly3" => x[0].powi(3) + x[1],
            "rational" => x[0] / (1.0 + x[1] * x[1]),
            _ => 10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4],
        };
        let eps = if noise > 0.0 { noise * standard_normal(rng) } else { 0.0 };
        for (c, v) in columns.iter_mut().zip(&x) {
            c.push(*v);
        }
        targets.push(y + eps);
    }
    Dataset::new(generator, format!("synthetic:{generator}"), columns, targets)
}

/// Box-Muller; avoids pulling in a distributions crate for one draw.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Dataset name to file mapping, stored as a JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(skip)]
    pub root: PathBuf,
    pub datasets: BTreeMap<String, PathBuf>,
}

impl Registry {
    pub const FILE_NAME: &'static str = "registry.json";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| DataError::Registry { path: path.display().to_string(), message: e.to_string() })?;
        let mut reg: Registry = serde_json::from_str(&text)
            .map_err(|e| DataError::Registry { path: path.display().to_string(), message: e.to_string() })?;
        reg.root = root;
        Ok(reg)
    }

    pub fn path_of(&self, name: &str) -> Option<PathBuf> {
        self.datasets.get(name).map(|p| if p.is_absolute() { p.clone() } else { self.root.join(p) })
    }
}

/// Resolve a dataset specifier: an existing CSV path, a registry name, or
/// `synthetic:<generator>[:n]` (seeded deterministically from the generator name).
pub fn resolve_dataset(spec: &str, registry: Option<&Registry>) -> Result<Dataset, DataError> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let generator = parts.next().unwrap_or_default();
        let n = match parts.next() {
            Some(s) => s.parse().map_err(|_| DataError::UnknownDataset(spec.to_string()))?,
            None => 103,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(fnv1a(generator.as_bytes()));
        let mut ds = synthetic_dataset(generator, n, 0.0, &mut rng)?;
        ds.name = spec.to_string();
        return Ok(ds);
    }
    let as_path = Path::new(spec);
    if as_path.is_file() {
        return load_csv(as_path);
    }
    if let Some(path) = registry.and_then(|r| r.path_of(spec)) {
        let mut ds = load_csv(&path)?;
        ds.name = spec.to_string();
        return Ok(ds);
    }
    Err(DataError::UnknownDataset(spec.to_string()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i * i) as f64, 2.0 * i as f64 + 1.0]).collect();
        Dataset::from_rows("toy", "mem", &rows).unwrap()
    }

    #[test]
    fn header_detection() {
        let ds = parse_csv("x1,x2,y\n1,2,3\n4,5,6\n", "h", "mem").unwrap();
        assert_eq!((ds.n_rows(), ds.n_features()), (2, 2));
        assert_eq!(ds.targets(), &[3.0, 6.0]);
        let ds = parse_csv("1,2,3\n4,5,6\n", "h", "mem").unwrap();
        assert_eq!(ds.n_rows(), 2);
    }

    #[test]
    fn parse_error_names_row() {
        let text = "a,b,y\n1,2,3\n1,2,3\n1,2,3\nabc,2,3\n";
        match parse_csv(text, "bad", "mem") {
            Err(DataError::Parse { row, col, .. }) => assert_eq!((row, col), (5, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv("1,2,3\n1,2\n", "r", "mem"), Err(DataError::Parse { row: 2, .. })));
        assert!(matches!(parse_csv("", "e", "mem"), Err(DataError::EmptyFile { .. })));
        assert!(matches!(parse_csv("x,y\n", "e", "mem"), Err(DataError::EmptyFile { .. })));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = toy(103);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let split = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut rng).unwrap();
        assert_eq!((split.train.n_rows(), split.test.n_rows()), (72, 31));
        let mut all: Vec<usize> = split.train_rows.iter().chain(&split.test_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_empty_partition() {
        let ds = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(monte_carlo_split(&ds, 0.9, StandardizeScope::Train, &mut rng).is_err());
        assert!(monte_carlo_split(&toy(10), 0.0, StandardizeScope::Train, &mut rng).is_err());
        assert!(monte_carlo_split(&toy(10), 1.0, StandardizeScope::Train, &mut rng).is_err());
    }

    #[test]
    fn seeds_give_different_partitions() {
        let ds = toy(103);
        let parts: Vec<Vec<usize>> = (0..30)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut rng).unwrap().train_rows
            })
            .collect();
        assert!(parts.iter().any(|p| p != &parts[0]));
    }

    #[test]
    fn standardize_hand_values() {
        let ds = Dataset::new("s", "mem", vec![vec![2.0, 4.0, 9.0], vec![5.0, 5.0, 5.0]], vec![1.0, 2.0, 3.0]).unwrap();
        let split = SplitDataset {
            train: ds.select(&[0, 1], ""),
            test: ds.select(&[2], ""),
            train_rows: vec![0, 1],
            test_rows: vec![2],
            scope: StandardizeScope::Train,
            standardization: None,
        };
        let s = standardize(split);
        assert_eq!(s.train.columns()[0], vec![-1.0, 1.0]);
        assert_eq!(s.test.columns()[0], vec![6.0]);
        assert_eq!(s.train.columns()[1], vec![0.0, 0.0]);
        assert_eq!(s.test.columns()[1], vec![0.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let ds = synthetic_dataset("friedman", 60, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for scope in [StandardizeScope::Train, StandardizeScope::Full] {
            let once = monte_carlo_split(&ds, 0.7, scope, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let twice = standardize(once.clone());
            for (a, b) in once.train.columns().iter().flatten().zip(twice.train.columns().iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in once.test.targets().iter().zip(twice.test.targets()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_columns_unit_scaled() {
        let ds = synthetic_dataset("friedman", 103, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let split = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for col in split.train.columns().iter().chain(std::iter::once(&split.train.targets)) {
            let st = ColumnStats::fit(col.iter());
            assert!(st.mean.abs() < 1e-9);
            assert!((st.std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn test_rows_do_not_leak_into_train_stats() {
        let ds = toy(40);
        let split = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let mut r: Vec<f64> = ds.columns().iter().map(|c| c[i]).collect();
                r.push(ds.targets()[i]);
                r
            })
            .collect();
        for &t in &split.test_rows {
            rows[t].iter_mut().for_each(|v| *v = *v * 100.0 + 7.0);
        }
        let perturbed = Dataset::from_rows("toy", "mem", &rows).unwrap();
        let split2 =
            monte_carlo_split(&perturbed, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(split.standardization, split2.standardization);
        assert_eq!(split.train, split2.train);
    }

    #[test]
    fn synthetic_generators() {
        let a = synthetic_dataset("poly3", 50, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synthetic_dataset("poly3", 50, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.n_rows(), a.n_features()), (50, 2));
        for i in 0..50 {
            let (x0, x1) = (a.columns()[0][i], a.columns()[1][i]);
            assert!((a.targets()[i] - (x0.powi(3) + x1)).abs() < 1e-12);
        }
        let noisy = synthetic_dataset("poly3", 50, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(noisy.targets(), a.targets());
        assert!(matches!(
            synthetic_dataset("nope", 5, 0.0, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(DataError::UnknownGenerator(_))
        ));
    }

    #[test]
    fn train_size_rounds_half_up() {
        assert_eq!(train_size(103, 0.7), 72);
        assert_eq!(train_size(5, 0.5), 3);
        assert_eq!(train_size(10, 0.7), 7);
    }

    #[test]
    fn csv_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset("rational", 12, 0.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.columns(), ds.columns());
        assert_eq!(back.targets(), ds.targets());
    }
}

//! Run orchestration and per-generation population metrics.
//!
//! Each generation produces one row per variant: the genotype population and
//! the phenotype population extracted at every approximation level. Metrics
//! are written as soon as a generation completes so interrupted runs keep
//! their prefix.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{monte_carlo_split, resolve_dataset, DataError, Dataset, Registry, SplitDataset, StandardizeScope};
use crate::evolution::{best_index, evolve_generation, initial_population, rmse_fitness, GpConfig, Individual};
use crate::expr::Tree;
use crate::phenotype::{extract_population_phenotypes, with_exact_level, ApproximationLevel, SimplificationReport};

pub const METRICS_HEADER: [&str; 14] = [
    "run_id",
    "dataset",
    "seed",
    "generation",
    "variant",
    "mean_length",
    "median_train_fit",
    "median_test_fit",
    "diversity",
    "mean_terminal_prop",
    "median_smad",
    "elite_train_fit",
    "elite_test_fit",
    "elite_length",
];

pub const METRICS_FILE: &str = "metrics.csv";
pub const ELITES_FILE: &str = "elites.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{reports} phenotype report sets for {individuals} individuals")]
    CountMismatch { reports: usize, individuals: usize },
}

impl ExperimentError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

/// Everything that determines a run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub gp: GpConfig,
    pub t_levels: Vec<f64>,
    pub split_ratio: f64,
    pub standardize_scope: StandardizeScope,
    /// Phenotype extraction on or off; never changes the genotype trajectory.
    pub monitor_phenotypes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gp: GpConfig::default(),
            t_levels: vec![2.5, 5.0, 10.0, 20.0],
            split_ratio: 0.7,
            standardize_scope: StandardizeScope::Train,
            monitor_phenotypes: true,
        }
    }
}

const RUN_KEYS: [&str; 4] = ["t_levels", "split_ratio", "standardize_scope", "monitor_phenotypes"];
const GP_KEYS: [&str; 10] = [
    "population_size",
    "generations",
    "p_crossover",
    "p_mutation",
    "tournament_pressure",
    "init_max_depth",
    "rng_seed",
    "constant_range",
    "constant_set",
    "elitism",
];

impl RunConfig {
    /// Parse a JSON config, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| ExperimentError::Config("config must be a JSON object".into()))?;
        if let Some(k) = obj.keys().find(|k| !RUN_KEYS.contains(&k.as_str()) && !GP_KEYS.contains(&k.as_str())) {
            return Err(ExperimentError::Config(format!("unknown config key '{k}'")));
        }
        serde_json::from_value(value).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.gp.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.levels()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(ExperimentError::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        Ok(())
    }

    /// Requested levels plus the exact level, ascending.
    pub fn levels(&self) -> Result<Vec<ApproximationLevel>, ExperimentError> {
        let levels = self
            .t_levels
            .iter()
            .map(|&t| ApproximationLevel::new(t).map_err(|e| ExperimentError::Config(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(with_exact_level(&levels))
    }
}

/// Structural diversity: number of distinct canonical serializations.
pub fn diversity<'a>(trees: impl IntoIterator<Item = &'a Tree>) -> usize {
    trees.into_iter().map(|t| t.to_string()).collect::<HashSet<_>>().len()
}

/// Fraction of nodes that are features or constants.
pub fn terminal_proportion(tree: &Tree) -> f64 {
    tree.terminal_count() as f64 / tree.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    s / c as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    /// `genotype` or a level label such as `t2.5`.
    pub variant: String,
    pub mean_length: f64,
    pub median_train_fit: f64,
    pub median_test_fit: f64,
    pub diversity: usize,
    pub mean_terminal_prop: f64,
    pub median_smad: f64,
    pub elite_train_fit: f64,
    pub elite_test_fit: f64,
    pub elite_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub run_id: String,
    pub dataset: String,
    pub seed: u64,
    pub generation: usize,
    pub variants: Vec<VariantMetrics>,
}

impl GenerationMetrics {
    pub fn variant(&self, name: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.variants
            .iter()
            .map(|v| {
                vec![
                    self.run_id.clone(),
                    self.dataset.clone(),
                    self.seed.to_string(),
                    self.generation.to_string(),
                    v.variant.clone(),
                    v.mean_length.to_string(),
                    v.median_train_fit.to_string(),
                    v.median_test_fit.to_string(),
                    v.diversity.to_string(),
                    v.mean_terminal_prop.to_string(),
                    v.median_smad.to_string(),
                    v.elite_train_fit.to_string(),
                    v.elite_test_fit.to_string(),
                    v.elite_length.to_string(),
                ]
            })
            .collect()
    }
}

/// The elite genotype and its phenotypes for one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliteRecord {
    pub generation: usize,
    pub genotype: Tree,
    pub train_fitness: f64,
    pub test_fitness: f64,
    /// `(level label, phenotype)` pairs, exact level first.
    pub phenotypes: Vec<(String, Tree)>,
}

/// Aggregates for the genotype population and, when `reports` is given,
/// for the phenotype population at every level. The elite is the genotype
/// with the lowest training error; each variant reports that individual's
/// phenotype.
pub fn generation_metrics(
    population: &[Individual],
    reports: Option<&[Vec<SimplificationReport>]>,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<VariantMetrics>, ExperimentError> {
    let elite = best_index(population);
    let mut out = vec![VariantMetrics {
        variant: "genotype".into(),
        mean_length: mean(population.iter().map(|i| i.genotype.len() as f64)),
        median_train_fit: median(&population.iter().map(|i| i.train_fitness).collect::<Vec<_>>()),
        median_test_fit: median(&population.iter().map(|i| i.test_fitness).collect::<Vec<_>>()),
        diversity: diversity(population.iter().map(|i| &i.genotype)),
        mean_terminal_prop: mean(population.iter().map(|i| terminal_proportion(&i.genotype))),
        median_smad: 0.0,
        elite_train_fit: population[elite].train_fitness,
        elite_test_fit: population[elite].test_fitness,
        elite_length: population[elite].genotype.len(),
    }];
    let Some(reports) = reports else { return Ok(out) };
    if reports.len() != population.len() {
        return Err(ExperimentError::CountMismatch { reports: reports.len(), individuals: population.len() });
    }
    let n_levels = reports.first().map(Vec::len).unwrap_or(0);
    if reports.iter().any(|r| r.len() != n_levels) {
        return Err(ExperimentError::CountMismatch { reports: reports.len(), individuals: population.len() });
    }
    for level in 0..n_levels {
        let column: Vec<&SimplificationReport> = reports.iter().map(|r| &r[level]).collect();
        let train_fit: Vec<f64> = column
            .iter()
            .map(|r| rmse_fitness(&r.phenotype_semantics, train.targets()).expect("train-sized semantics"))
            .collect();
        let test_fit: Vec<f64> = column
            .iter()
            .map(|r| {
                let pred = r.phenotype.predict(test.columns()).expect("phenotype uses genotype features");
                rmse_fitness(&pred, test.targets()).expect("test-sized semantics")
            })
            .collect();
        out.push(VariantMetrics {
            variant: column[0].t.label(),
            mean_length: mean(column.iter().map(|r| r.phenotype_size as f64)),
            median_train_fit: median(&train_fit),
            median_test_fit: median(&test_fit),
            diversity: diversity(column.iter().map(|r| &r.phenotype)),
            mean_terminal_prop: mean(column.iter().map(|r| terminal_proportion(&r.phenotype))),
            median_smad: median(&column.iter().map(|r| r.smad_vs_genotype).collect::<Vec<_>>()),
            elite_train_fit: train_fit[elite],
            elite_test_fit: test_fit[elite],
            elite_length: column[elite].phenotype_size,
        });
    }
    Ok(out)
}

/// Prepared data and evolving population of one run.
pub struct Run {
    pub config: RunConfig,
    pub split: SplitDataset,
    levels: Vec<ApproximationLevel>,
    rng: ChaCha8Rng,
    population: Vec<Individual>,
    generation: usize,
}

impl Run {
    /// Split and standardize with stream 0 of the seed, initialize with stream 1.
    pub fn new(dataset: &Dataset, config: RunConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let levels = config.levels()?;
        let mut split_rng = ChaCha8Rng::seed_from_u64(config.gp.rng_seed);
        split_rng.set_stream(0);
        let split = monte_carlo_split(dataset, config.split_ratio, config.standardize_scope, &mut split_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.gp.rng_seed);
        rng.set_stream(1);
        let population = initial_population(&config.gp, &split.train, &split.test, &mut rng);
        Ok(Run { config, split, levels, rng, population, generation: 0 })
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn levels(&self) -> &[ApproximationLevel] {
        &self.levels
    }

    pub fn step(&mut self) {
        self.population =
            evolve_generation(&self.population, &self.config.gp, &self.split.train, &self.split.test, &mut self.rng);
        self.generation += 1;
    }

    /// Metrics (and elite record) of the current population.
    pub fn observe(&self, run_id: &str, dataset: &str) -> Result<(GenerationMetrics, EliteRecord), ExperimentError> {
        let reports = self
            .config
            .monitor_phenotypes
            .then(|| extract_population_phenotypes(&self.population, &self.levels, self.split.train.columns()));
        let variants = generation_metrics(&self.population, reports.as_deref(), &self.split.train, &self.split.test)?;
        let elite = best_index(&self.population);
        let ind = &self.population[elite];
        let record = EliteRecord {
            generation: self.generation,
            genotype: ind.genotype.clone(),
            train_fitness: ind.train_fitness,
            test_fitness: ind.test_fitness,
            phenotypes: reports
                .map(|r| r[elite].iter().map(|rep| (rep.t.label(), rep.phenotype.clone())).collect())
                .unwrap_or_default(),
        };
        let metrics = GenerationMetrics {
            run_id: run_id.to_string(),
            dataset: dataset.to_string(),
            seed: self.config.gp.rng_seed,
            generation: self.generation,
            variants,
        };
        Ok((metrics, record))
    }
}

/// Receives each generation's results as soon as they are computed.
pub trait MetricsSink {
    fn record(&mut self, metrics: &GenerationMetrics, elite: &EliteRecord) -> Result<(), ExperimentError>;
}

#[derive(Default, Debug)]
pub struct MemorySink {
    pub metrics: Vec<GenerationMetrics>,
    pub elites: Vec<EliteRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, metrics: &GenerationMetrics, elite: &EliteRecord) -> Result<(), ExperimentError> {
        self.metrics.push(metrics.clone());
        self.elites.push(elite.clone());
        Ok(())
    }
}

/// Writes `metrics.csv` and `elites.jsonl`, flushing after every generation.
pub struct FileSink {
    metrics_path: PathBuf,
    elites_path: PathBuf,
    metrics: csv::Writer<BufWriter<File>>,
    elites: BufWriter<File>,
}

impl FileSink {
    pub fn create(dir: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let elites_path = dir.join(ELITES_FILE);
        let file = File::create(&metrics_path).map_err(|e| ExperimentError::io(&metrics_path, e))?;
        let mut metrics = csv::Writer::from_writer(BufWriter::new(file));
        metrics.write_record(METRICS_HEADER).map_err(|e| ExperimentError::io(&metrics_path, e))?;
        let elites = BufWriter::new(File::create(&elites_path).map_err(|e| ExperimentError::io(&elites_path, e))?);
        Ok(FileSink { metrics_path, elites_path, metrics, elites })
    }
}

impl MetricsSink for FileSink {
    fn record(&mut self, metrics: &GenerationMetrics, elite: &EliteRecord) -> Result<(), ExperimentError> {
        for row in metrics.csv_rows() {
            self.metrics.write_record(&row).map_err(|e| ExperimentError::io(&self.metrics_path, e))?;
        }
        self.metrics.flush().map_err(|e| ExperimentError::io(&self.metrics_path, e))?;
        let line = serde_json::to_string(elite).map_err(|e| ExperimentError::io(&self.elites_path, e))?;
        writeln!(self.elites, "{line}").map_err(|e| ExperimentError::io(&self.elites_path, e))?;
        self.elites.flush().map_err(|e| ExperimentError::io(&self.elites_path, e))
    }
}

/// Execute initialization plus `generations` steps, reporting generation 0
/// and every subsequent generation to `sink`.
pub fn run_with_sink(
    run_id: &str,
    dataset: &Dataset,
    config: &RunConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(), ExperimentError> {
    let mut run = Run::new(dataset, config.clone())?;
    loop {
        let (metrics, elite) = run.observe(run_id, &dataset.name)?;
        sink.record(&metrics, &elite)?;
        if run.generation() >= config.gp.generations {
            return Ok(());
        }
        run.step();
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: String,
    pub dataset_provenance: String,
    pub seed: u64,
    pub config: RunConfig,
    pub software_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub metrics_path: PathBuf,
    pub elites_path: PathBuf,
    pub status: RunStatus,
    pub message: Option<String>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| ExperimentError::io(&path, e))?;
    fs::write(&path, text).map_err(|e| ExperimentError::io(&path, e))
}

/// Run one experiment into `out_dir` (metrics CSV, elites JSONL, manifest).
pub fn run_experiment(
    run_id: &str,
    dataset: &Dataset,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<RunManifest, ExperimentError> {
    config.validate()?;
    let mut sink = FileSink::create(out_dir)?;
    let mut manifest = RunManifest {
        run_id: run_id.to_string(),
        dataset: dataset.name.clone(),
        dataset_provenance: dataset.provenance.clone(),
        seed: config.gp.rng_seed,
        config: config.clone(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: unix_now(),
        finished_unix: None,
        metrics_path: PathBuf::from(METRICS_FILE),
        elites_path: PathBuf::from(ELITES_FILE),
        status: RunStatus::Running,
        message: None,
    };
    write_manifest(out_dir, &manifest)?;
    let result = run_with_sink(run_id, dataset, config, &mut sink);
    manifest.finished_unix = Some(unix_now());
    match &result {
        Ok(()) => manifest.status = RunStatus::Complete,
        Err(e) => {
            manifest.status =
                if matches!(e, ExperimentError::Io { .. }) { RunStatus::Partial } else { RunStatus::Failed };
            manifest.message = Some(e.to_string());
        }
    }
    let written = write_manifest(out_dir, &manifest);
    result?;
    written?;
    Ok(manifest)
}

/// A matrix of runs: datasets x operator settings x seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    /// `[p_crossover, p_mutation]` pairs.
    pub operator_settings: Vec<[f64; 2]>,
    pub base: RunConfig,
    pub jobs: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            datasets: Vec::new(),
            seeds: (0..30).collect(),
            operator_settings: vec![[0.8, 0.2], [0.2, 0.8]],
            base: RunConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchJob {
    pub run_id: String,
    pub dataset: String,
    pub config: RunConfig,
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub results: Vec<(BatchJob, Result<(), String>)>,
    pub combined: PathBuf,
}

impl BatchOutcome {
    pub fn all_ok(&self) -> bool {
        self.results.iter().all(|(_, r)| r.is_ok())
    }
}

fn slug(s: &str) -> String {
    let base = Path::new(s).file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| s.to_string());
    base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

impl BatchSpec {
    pub fn jobs(&self) -> Vec<BatchJob> {
        let mut jobs = Vec::new();
        for ds in &self.datasets {
            for [pc, pm] in &self.operator_settings {
                for &seed in &self.seeds {
                    let mut config = self.base.clone();
                    config.gp.p_crossover = *pc;
                    config.gp.p_mutation = *pm;
                    config.gp.rng_seed = seed;
                    let dataset_slug = if ds.starts_with("synthetic:") { ds.replace(':', "_") } else { slug(ds) };
                    jobs.push(BatchJob {
                        run_id: format!("{dataset_slug}__pc{pc}__s{seed}"),
                        dataset: ds.clone(),
                        config,
                    });
                }
            }
        }
        jobs
    }
}

/// Execute all jobs (up to `spec.jobs` at once), then concatenate the
/// per-run metrics of successful runs into `combined.csv` ordered by run id.
pub fn run_batch(
    spec: &BatchSpec,
    out_dir: &Path,
    registry: Option<&Registry>,
) -> Result<BatchOutcome, ExperimentError> {
    spec.base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::io(out_dir, e))?;
    let jobs = spec.jobs();
    let exec = |job: &BatchJob| -> Result<(), String> {
        let dataset = resolve_dataset(&job.dataset, registry).map_err(|e| e.to_string())?;
        run_experiment(&job.run_id, &dataset, &job.config, &out_dir.join(&job.run_id))
            .map(|_| ())
            .map_err(|e| e.to_string())
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), String>> = {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs.max(1))
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(exec).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), String>> = jobs.iter().map(exec).collect();

    let mut ok_ids: Vec<&str> =
        jobs.iter().zip(&results).filter(|(_, r)| r.is_ok()).map(|(j, _)| j.run_id.as_str()).collect();
    ok_ids.sort_unstable();
    let combined = out_dir.join("combined.csv");
    let mut text = METRICS_HEADER.join(",");
    text.push('\n');
    for id in ok_ids {
        let path = out_dir.join(id).join(METRICS_FILE);
        let body = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        for line in body.lines().skip(1) {
            text.push_str(line);
            text.push('\n');
        }
    }
    fs::write(&combined, text).map_err(|e| ExperimentError::io(&combined, e))?;
    Ok(BatchOutcome { results: jobs.into_iter().zip(results).collect(), combined })
}

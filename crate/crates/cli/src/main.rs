use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phenogp_core::data::{resolve_dataset, synthetic_dataset, write_csv, DataError, Registry, GENERATORS};
use phenogp_core::experiment::{run_batch, run_experiment, BatchSpec, ExperimentError, RunConfig};
use phenogp_core::phenotype::{simplify, ApproximationLevel};
use phenogp_core::Tree;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

const DATA_DIR_ENV: &str = "PHENOGP_DATA_DIR";

#[derive(Parser)]
#[command(name = "phenogp", version, about = "Tree GP symbolic regression with genotype/phenotype monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve one run and write metrics, elites and a manifest.
    Run(RunArgs),
    /// Extract the phenotype of a single tree.
    Simplify(SimplifyArgs),
    /// Run a datasets x operator settings x seeds matrix.
    Batch(BatchArgs),
    /// Inspect the dataset registry or write synthetic data.
    Datasets {
        #[command(subcommand)]
        action: DatasetsAction,
    },
}

/// Overrides shared by `run` and `batch`; each has a config-file key.
#[derive(Args, Default)]
struct GpFlags {
    /// Crossover probability (`p_crossover`).
    #[arg(long)]
    pc: Option<f64>,
    /// Mutation probability (`p_mutation`).
    #[arg(long)]
    pm: Option<f64>,
    /// Population size (`population_size`).
    #[arg(long)]
    pop: Option<usize>,
    /// Number of generations (`generations`).
    #[arg(long)]
    generations: Option<usize>,
    /// Approximation percentiles, comma separated (`t_levels`).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    t_levels: Option<Vec<f64>>,
}

impl GpFlags {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.pc {
            config.gp.p_crossover = v;
        }
        if let Some(v) = self.pm {
            config.gp.p_mutation = v;
        }
        if let Some(v) = self.pop {
            config.gp.population_size = v;
        }
        if let Some(v) = self.generations {
            config.gp.generations = v;
        }
        if let Some(v) = &self.t_levels {
            config.t_levels = v.clone();
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// CSV path, registry name or `synthetic:<generator>[:n]` (`dataset`).
    #[arg(long)]
    dataset: Option<String>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (`rng_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (`out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier written into every metrics row (`run_id`).
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    gp: GpFlags,
}

#[derive(Args)]
struct SimplifyArgs {
    /// File holding a tree in canonical s-expression form.
    #[arg(long, conflicts_with = "expr", required_unless_present = "expr")]
    tree: Option<PathBuf>,
    /// Tree given inline.
    #[arg(long)]
    expr: Option<String>,
    /// Inputs: CSV path, registry name or `synthetic:<generator>[:n]`.
    /// The last CSV column is the target and is not used.
    #[arg(long)]
    data: String,
    /// Approximation percentile in [0, 100).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    t: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Datasets; repeat the flag or separate with commas (`datasets`).
    #[arg(long, value_delimiter = ',')]
    dataset: Vec<String>,
    /// JSON batch specification.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed (`seeds` start).
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per dataset and operator setting (`seeds` length).
    #[arg(long)]
    runs: Option<u64>,
    /// Operator settings as `pc:pm` pairs, comma separated (`operator_settings`).
    #[arg(long, value_delimiter = ',')]
    operators: Option<Vec<String>>,
    /// Concurrent runs (`jobs`).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (`out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    gp: GpFlags,
}

#[derive(Subcommand)]
enum DatasetsAction {
    /// List registry entries and synthetic generators.
    List,
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = 103)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::Config(m),
            ExperimentError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Simplify(args) => cmd_simplify(args),
        Command::Batch(args) => cmd_batch(args),
        Command::Datasets { action } => cmd_datasets(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn registry() -> Result<Option<Registry>, CliError> {
    let dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    if dir.join(Registry::FILE_NAME).is_file() {
        Ok(Some(Registry::load(&dir)?))
    } else {
        Ok(None)
    }
}

fn read_json_object(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

fn take_string(map: &mut Map<String, Value>, key: &str) -> Result<Option<String>, CliError> {
    match map.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(CliError::Config(format!("'{key}' must be a string, got {other}"))),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut file = match &args.config {
        Some(path) => read_json_object(path)?,
        None => Map::new(),
    };
    let file_dataset = take_string(&mut file, "dataset")?;
    let file_out = take_string(&mut file, "out")?;
    let file_run_id = take_string(&mut file, "run_id")?;
    let mut config = RunConfig::from_json(&Value::Object(file).to_string())?;
    args.gp.apply(&mut config);
    if let Some(seed) = args.seed {
        config.gp.rng_seed = seed;
    }
    config.validate()?;

    let spec = args
        .dataset
        .or(file_dataset)
        .ok_or_else(|| CliError::Config("no dataset given (--dataset or \"dataset\" in the config)".into()))?;
    let out = args
        .out
        .or(file_out.map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no output directory given (--out or \"out\" in the config)".into()))?;
    let dataset = resolve_dataset(&spec, registry()?.as_ref())?;
    let run_id = args.run_id.or(file_run_id).unwrap_or_else(|| format!("{}__s{}", dataset.name, config.gp.rng_seed));
    let manifest = run_experiment(&run_id, &dataset, &config, &out)?;
    println!("{}: {} generations written to {}", manifest.run_id, config.gp.generations, out.display());
    Ok(())
}

fn cmd_simplify(args: SimplifyArgs) -> Result<(), CliError> {
    let level = ApproximationLevel::new(args.t).map_err(|e| CliError::Config(e.to_string()))?;
    let text = match (&args.expr, &args.tree) {
        (Some(expr), _) => expr.clone(),
        (None, Some(path)) => {
            fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::Config("give --tree or --expr".into())),
    };
    let tree: Tree = text.trim().parse().map_err(|e| CliError::Data(format!("tree: {e}")))?;
    let dataset = resolve_dataset(&args.data, registry()?.as_ref())?;
    let semantics = tree.evaluate(dataset.columns()).map_err(|e| CliError::Data(e.to_string()))?;
    let report = simplify(&tree, &semantics, level).map_err(|e| CliError::Runtime(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    match args.out {
        Some(path) => fs::write(&path, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn parse_operator(s: &str) -> Result<[f64; 2], CliError> {
    let bad = || CliError::Config(format!("operator setting '{s}' must look like 0.8:0.2"));
    let (pc, pm) = s.split_once(':').ok_or_else(bad)?;
    Ok([pc.trim().parse().map_err(|_| bad())?, pm.trim().parse().map_err(|_| bad())?])
}

fn cmd_batch(args: BatchArgs) -> Result<(), CliError> {
    let mut file = match &args.config {
        Some(path) => read_json_object(path)?,
        None => Map::new(),
    };
    let file_out = take_string(&mut file, "out")?;
    if let Some(base) = file.get("base") {
        // Unknown keys inside the nested run config are rejected here.
        RunConfig::from_json(&base.to_string())?;
    }
    let mut spec: BatchSpec =
        serde_json::from_value(Value::Object(file)).map_err(|e| CliError::Config(format!("batch config: {e}")))?;
    if !args.dataset.is_empty() {
        spec.datasets = args.dataset;
    }
    if args.seed.is_some() || args.runs.is_some() {
        let start = args.seed.unwrap_or_else(|| spec.seeds.first().copied().unwrap_or(0));
        let runs = args.runs.unwrap_or(spec.seeds.len() as u64);
        spec.seeds = (start..start + runs).collect();
    }
    if let Some(ops) = &args.operators {
        spec.operator_settings = ops.iter().map(|s| parse_operator(s)).collect::<Result<_, _>>()?;
    }
    if let Some(jobs) = args.jobs {
        spec.jobs = jobs;
    }
    args.gp.apply(&mut spec.base);
    if spec.datasets.is_empty() {
        return Err(CliError::Config("no datasets given (--dataset or \"datasets\" in the config)".into()));
    }
    for [pc, pm] in &spec.operator_settings {
        let mut probe = spec.base.clone();
        probe.gp.p_crossover = *pc;
        probe.gp.p_mutation = *pm;
        probe.validate()?;
    }
    let out = args
        .out
        .or(file_out.map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no output directory given (--out or \"out\" in the config)".into()))?;

    let outcome = run_batch(&spec, &out, registry()?.as_ref())?;
    let mut failed = 0;
    for (job, result) in &outcome.results {
        match result {
            Ok(()) => println!("ok     {}", job.run_id),
            Err(e) => {
                failed += 1;
                println!("FAILED {}: {e}", job.run_id);
            }
        }
    }
    println!(
        "{} of {} runs succeeded; combined metrics in {}",
        outcome.results.len() - failed,
        outcome.results.len(),
        outcome.combined.display()
    );
    if outcome.all_ok() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failed} run(s) failed")))
    }
}

fn cmd_datasets(action: DatasetsAction) -> Result<(), CliError> {
    match action {
        DatasetsAction::List => {
            match registry()? {
                Some(reg) => {
                    for name in reg.datasets.keys() {
                        let path = reg.path_of(name).unwrap_or_default();
                        println!("{name}\t{}", path.display());
                    }
                }
                None => eprintln!("no registry found (set {DATA_DIR_ENV} or create data/{})", Registry::FILE_NAME),
            }
            for generator in GENERATORS {
                println!("synthetic:{generator}\t(generated)");
            }
            Ok(())
        }
        DatasetsAction::Synth { generator, n, noise, seed, out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthetic_dataset(&generator, n, noise, &mut rng)?;
            write_csv(&ds, &out)?;
            println!("wrote {} rows x {} features to {}", ds.n_rows(), ds.n_features(), out.display());
            Ok(())
        }
    }
}

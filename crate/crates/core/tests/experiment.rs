use std::fs;

use phenogp_core::data::resolve_dataset;
use phenogp_core::experiment::{
    run_experiment, run_with_sink, MemorySink, Run, RunConfig, RunStatus, ELITES_FILE, METRICS_FILE, METRICS_HEADER,
};
use phenogp_core::Dataset;

fn dataset() -> Dataset {
    resolve_dataset("synthetic:friedman", None).unwrap()
}

fn config(seed: u64, generations: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.gp.rng_seed = seed;
    c.gp.population_size = 30;
    c.gp.generations = generations;
    c
}

#[test]
fn zero_generations_records_initial_population_only() {
    let mut sink = MemorySink::default();
    run_with_sink("r", &dataset(), &config(0, 0), &mut sink).unwrap();
    assert_eq!(sink.metrics.len(), 1);
    assert_eq!(sink.metrics[0].generation, 0);
    assert_eq!(sink.metrics[0].csv_rows().len(), 6);
}

#[test]
fn monitoring_does_not_touch_the_genotypes() {
    let ds = dataset();
    for seed in 0..3 {
        let mut watched = Run::new(&ds, config(seed, 15)).unwrap();
        let mut blind = Run::new(&ds, RunConfig { monitor_phenotypes: false, ..config(seed, 15) }).unwrap();
        for _ in 0..15 {
            watched.observe("w", "d").unwrap();
            let a: Vec<_> =
                watched.population().iter().map(|i| (i.genotype.clone(), i.train_fitness.to_bits())).collect();
            let b: Vec<_> =
                blind.population().iter().map(|i| (i.genotype.clone(), i.train_fitness.to_bits())).collect();
            assert_eq!(a, b);
            watched.step();
            blind.step();
        }
    }
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset();
    for name in ["a", "b"] {
        run_experiment("same", &ds, &config(4, 12), &dir.path().join(name)).unwrap();
    }
    for file in [METRICS_FILE, ELITES_FILE] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn metrics_file_follows_schema() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_experiment("schema", &dataset(), &config(2, 5), dir.path()).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    let variants: Vec<&str> = lines.take(6).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(variants, ["genotype", "t0", "t2.5", "t5", "t10", "t20"]);
}

#[test]
fn per_generation_invariants_hold() {
    let mut sink = MemorySink::default();
    run_with_sink("inv", &dataset(), &config(8, 25), &mut sink).unwrap();
    let mut exact_rows = 0;
    let mut exact_zero = 0;
    for gm in &sink.metrics {
        let genotype = gm.variant("genotype").unwrap();
        for v in &gm.variants {
            assert!(v.diversity >= 1 && v.diversity <= 30);
            assert!(v.mean_length <= genotype.mean_length);
            assert!(v.mean_terminal_prop > 0.0 && v.mean_terminal_prop <= 1.0);
        }
        let t0 = gm.variant("t0").unwrap();
        exact_rows += 1;
        if (t0.median_smad * 1e5).round() == 0.0 {
            exact_zero += 1;
        }
    }
    assert!(exact_zero * 100 >= exact_rows * 99);
    assert_eq!(sink.elites.len(), 26);
}

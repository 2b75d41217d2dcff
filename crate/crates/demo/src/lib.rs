//! Browser bindings: simplify a tree at a chosen percentile, draw random
//! trees, and run a small evolution reporting length curves per variant.
//!
//! The `*_json` functions are plain Rust and carry the logic; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use phenogp_core::data::{resolve_dataset, synthetic_dataset};
use phenogp_core::evolution::{grow, GpConfig};
use phenogp_core::experiment::{run_with_sink, MemorySink, RunConfig};
use phenogp_core::phenotype::{build_matrix, percentile_threshold, simplify, ApproximationLevel};
use phenogp_core::Tree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bounds that keep a browser tab responsive.
const MAX_INSTANCES: usize = 256;
const MAX_POPULATION: usize = 200;
const MAX_GENERATIONS: usize = 100;

#[derive(Serialize)]
struct SimplifyView {
    genotype: String,
    phenotype: String,
    t: f64,
    threshold: Option<f64>,
    genotype_size: usize,
    phenotype_size: usize,
    smad: f64,
    /// `[start, end)` pairs into the genotype's prefix order.
    replacements: Vec<[[usize; 2]; 2]>,
    /// p(t) across the percentile range, for drawing the threshold curve.
    percentile_curve: Vec<[f64; 2]>,
}

/// Simplify `expr` at percentile `t` on `instances` uniform inputs in [-2, 2].
pub fn simplify_json(expr: &str, t: f64, instances: usize, seed: u64) -> Result<String, String> {
    let tree: Tree = expr.trim().parse().map_err(|e| format!("{e}"))?;
    let level = ApproximationLevel::new(t).map_err(|e| e.to_string())?;
    let n = instances.clamp(1, MAX_INSTANCES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> =
        (0..tree.required_features().max(1)).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let sem = tree.evaluate(&inputs).map_err(|e| e.to_string())?;
    let report = simplify(&tree, &sem, level).map_err(|e| e.to_string())?;
    let matrix = build_matrix(&tree, &sem).map_err(|e| e.to_string())?;
    let percentile_curve = (1..=40)
        .map(|k| k as f64 * 2.5 - 0.5)
        .filter_map(|p| {
            let l = ApproximationLevel::new(p).ok()?;
            percentile_threshold(&matrix, l).map(|v| [p, v])
        })
        .collect();
    let view = SimplifyView {
        genotype: tree.to_string(),
        phenotype: report.phenotype.to_string(),
        t,
        threshold: report.threshold,
        genotype_size: report.original_size,
        phenotype_size: report.phenotype_size,
        smad: report.smad_vs_genotype,
        replacements: report
            .replacements
            .iter()
            .map(|r| [[r.target.start, r.target.end], [r.source.start, r.source.end]])
            .collect(),
        percentile_curve,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// A grow-method tree of depth at most `max_depth`, as canonical text.
pub fn random_tree_text(max_depth: usize, n_features: usize, seed: u64) -> String {
    let config = GpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grow(max_depth.clamp(1, 8), n_features.max(1), &config, &mut rng).to_string()
}

#[derive(Serialize)]
struct Curves {
    generations: Vec<usize>,
    variants: Vec<Curve>,
}

#[derive(Serialize)]
struct Curve {
    variant: String,
    mean_length: Vec<f64>,
    median_train_fit: Vec<f64>,
}

/// Evolve on a bundled synthetic problem and return per-variant curves.
pub fn evolve_json(
    dataset: &str,
    population: usize,
    generations: usize,
    p_crossover: f64,
    seed: u64,
) -> Result<String, String> {
    let data = match dataset.strip_prefix("synthetic:") {
        Some(_) => resolve_dataset(dataset, None).map_err(|e| e.to_string())?,
        None => {
            synthetic_dataset(dataset, 103, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?
        }
    };
    let mut config = RunConfig::default();
    config.gp.population_size = population.clamp(2, MAX_POPULATION);
    config.gp.generations = generations.min(MAX_GENERATIONS);
    config.gp.p_crossover = p_crossover;
    config.gp.p_mutation = 1.0 - p_crossover;
    config.gp.rng_seed = seed;
    let mut sink = MemorySink::default();
    run_with_sink("demo", &data, &config, &mut sink).map_err(|e| e.to_string())?;

    let names: Vec<String> = sink.metrics[0].variants.iter().map(|v| v.variant.clone()).collect();
    let variants = names
        .iter()
        .map(|name| {
            let rows: Vec<_> =
                sink.metrics.iter().map(|m| m.variant(name).expect("every generation has every variant")).collect();
            Curve {
                variant: name.clone(),
                mean_length: rows.iter().map(|v| v.mean_length).collect(),
                median_train_fit: rows.iter().map(|v| v.median_train_fit).collect(),
            }
        })
        .collect();
    let curves = Curves { generations: sink.metrics.iter().map(|m| m.generation).collect(), variants };
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = simplifyExpression)]
pub fn simplify_expression(expr: &str, t: f64, instances: u32, seed: u32) -> Result<String, JsValue> {
    simplify_json(expr, t, instances as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = randomTree)]
pub fn random_tree(max_depth: u32, n_features: u32, seed: u32) -> String {
    random_tree_text(max_depth as usize, n_features as usize, seed as u64)
}

#[wasm_bindgen(js_name = evolveCurves)]
pub fn evolve_curves(
    dataset: &str,
    population: u32,
    generations: u32,
    p_crossover: f64,
    seed: u32,
) -> Result<String, JsValue> {
    evolve_json(dataset, population as usize, generations as usize, p_crossover, seed as u64)
        .map_err(|e| JsValue::from_str(&e))
}

//! Ramped half-and-half initialization, tournament selection, swap crossover,
//! subtree mutation and the generational loop.
//!
//! No depth or size limit is applied after initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::expr::{Element, ExprError, Op, Span, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Probability of an ephemeral constant being exactly 0, and separately exactly 1.
pub const SPECIAL_CONSTANT_PROB: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub population_size: usize,
    pub generations: usize,
    pub p_crossover: f64,
    pub p_mutation: f64,
    /// Tournament size as a fraction of the population.
    pub tournament_pressure: f64,
    pub init_max_depth: usize,
    pub rng_seed: u64,
    pub constant_range: [f64; 2],
    /// When non-empty, constants are drawn uniformly from this set instead
    /// of the continuous range.
    pub constant_set: Vec<f64>,
    /// Copy the best individual into the next generation unchanged.
    pub elitism: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            population_size: 100,
            generations: 100,
            p_crossover: 0.8,
            p_mutation: 0.2,
            tournament_pressure: 0.04,
            init_max_depth: 5,
            rng_seed: 0,
            constant_range: [-1.0, 1.0],
            constant_set: Vec::new(),
            elitism: false,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: String| Err(EvolutionError::InvalidConfig(m));
        if self.population_size < 2 {
            return bad(format!("population_size must be >= 2, got {}", self.population_size));
        }
        if self.init_max_depth < 2 {
            return bad(format!("init_max_depth must be >= 2, got {}", self.init_max_depth));
        }
        let probs = [self.p_crossover, self.p_mutation];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("p_crossover and p_mutation must lie in [0, 1]".into());
        }
        if (self.p_crossover + self.p_mutation - 1.0).abs() > 1e-9 {
            return bad(format!(
                "p_crossover + p_mutation must equal 1, got {} + {}",
                self.p_crossover, self.p_mutation
            ));
        }
        if !(self.tournament_pressure > 0.0 && self.tournament_pressure <= 1.0) {
            return bad(format!("tournament_pressure must lie in (0, 1], got {}", self.tournament_pressure));
        }
        let [lo, hi] = self.constant_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("constant_range must be a finite interval, got [{lo}, {hi}]"));
        }
        if let Some(c) = self.constant_set.iter().find(|c| !c.is_finite()) {
            return bad(format!("constant_set values must be finite, got {c}"));
        }
        Ok(())
    }

    pub fn tournament_size(&self) -> usize {
        ((self.tournament_pressure * self.population_size as f64).round() as usize).max(2)
    }
}

fn random_terminal<R: Rng + ?Sized>(n_features: usize, config: &GpConfig, rng: &mut R) -> Element {
    let pick = rng.gen_range(0..=n_features);
    if pick < n_features {
        Element::Feature(pick)
    } else {
        random_constant(config, rng)
    }
}

fn random_constant<R: Rng + ?Sized>(config: &GpConfig, rng: &mut R) -> Element {
    if !config.constant_set.is_empty() {
        return Element::Constant(config.constant_set[rng.gen_range(0..config.constant_set.len())]);
    }
    let u: f64 = rng.gen();
    let [lo, hi] = config.constant_range;
    let value = if u < SPECIAL_CONSTANT_PROB {
        0.0
    } else if u < 2.0 * SPECIAL_CONSTANT_PROB {
        1.0
    } else if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    };
    Element::Constant(value)
}

fn random_function<R: Rng + ?Sized>(rng: &mut R) -> Element {
    Element::Function(Op::ALL[rng.gen_range(0..Op::ALL.len())])
}

/// "Grow": the root is a function; below it each position picks uniformly
/// over the union of functions and terminals until `max_depth` forces a terminal.
pub fn grow<R: Rng + ?Sized>(max_depth: usize, n_features: usize, config: &GpConfig, rng: &mut R) -> Tree {
    let mut out = Vec::new();
    grow_into(&mut out, max_depth, true, n_features, config, rng);
    Tree::from_valid(out)
}

fn grow_into<R: Rng + ?Sized>(
    out: &mut Vec<Element>,
    depth_left: usize,
    root: bool,
    n_features: usize,
    config: &GpConfig,
    rng: &mut R,
) {
    let el = if depth_left == 0 {
        random_terminal(n_features, config, rng)
    } else if root {
        random_function(rng)
    } else {
        let pick = rng.gen_range(0..Op::ALL.len() + n_features + 1);
        if pick < Op::ALL.len() {
            Element::Function(Op::ALL[pick])
        } else if pick - Op::ALL.len() < n_features {
            Element::Feature(pick - Op::ALL.len())
        } else {
            random_constant(config, rng)
        }
    };
    out.push(el);
    for _ in 0..el.arity() {
        grow_into(out, depth_left - 1, false, n_features, config, rng);
    }
}

/// "Full": functions everywhere above `depth`, terminals exactly at `depth`.
pub fn full<R: Rng + ?Sized>(depth: usize, n_features: usize, config: &GpConfig, rng: &mut R) -> Tree {
    fn go<R: Rng + ?Sized>(out: &mut Vec<Element>, left: usize, d: usize, c: &GpConfig, rng: &mut R) {
        if left == 0 {
            out.push(random_terminal(d, c, rng));
        } else {
            out.push(random_function(rng));
            go(out, left - 1, d, c, rng);
            go(out, left - 1, d, c, rng);
        }
    }
    let mut out = Vec::new();
    go(&mut out, depth, n_features, config, rng);
    Tree::from_valid(out)
}

/// Depths ramp over `2..=init_max_depth`; within each depth bucket
/// individuals alternate between grow and full.
pub fn ramped_half_and_half<R: Rng + ?Sized>(config: &GpConfig, n_features: usize, rng: &mut R) -> Vec<Tree> {
    let buckets = config.init_max_depth - 1;
    (0..config.population_size)
        .map(|i| {
            let depth = 2 + i % buckets;
            if (i / buckets).is_multiple_of(2) {
                grow(depth, n_features, config, rng)
            } else {
                full(depth, n_features, config, rng)
            }
        })
        .collect()
}

/// Root mean squared error.
pub fn rmse_fitness(semantics: &[f64], targets: &[f64]) -> Result<f64, EvolutionError> {
    if semantics.len() != targets.len() || semantics.is_empty() {
        return Err(EvolutionError::LengthMismatch { left: semantics.len(), right: targets.len() });
    }
    let sse: f64 = semantics.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / semantics.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub genotype: Tree,
    pub train_semantics: Vec<f64>,
    pub train_fitness: f64,
    pub test_fitness: f64,
}

impl Individual {
    pub fn evaluate(genotype: Tree, train: &Dataset, test: &Dataset) -> Result<Self, ExprError> {
        let train_semantics = genotype.predict(train.columns())?;
        let test_semantics = genotype.predict(test.columns())?;
        let train_fitness = rmse_fitness(&train_semantics, train.targets()).expect("lengths match by construction");
        let test_fitness = rmse_fitness(&test_semantics, test.targets()).expect("lengths match by construction");
        Ok(Individual { genotype, train_semantics, train_fitness, test_fitness })
    }
}

/// Index of the best (lowest) fitness among `candidates`; the first drawn wins ties.
pub fn tournament_winner(fitness: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if fitness[c] < fitness[best] {
            best = c;
        }
    }
    best
}

/// Draw `k` indices uniformly with replacement and return the fittest.
pub fn tournament_select<R: Rng + ?Sized>(fitness: &[f64], k: usize, rng: &mut R) -> usize {
    let candidates: Vec<usize> = (0..k.max(1)).map(|_| rng.gen_range(0..fitness.len())).collect();
    tournament_winner(fitness, &candidates)
}

pub fn swap_crossover<R: Rng + ?Sized>(a: &Tree, b: &Tree, rng: &mut R) -> (Tree, Span, Span) {
    let target = a.subtree_span(rng.gen_range(0..a.len())).expect("index in range");
    let source = b.subtree_span(rng.gen_range(0..b.len())).expect("index in range");
    (a.splice(target, b, source).expect("spans are valid"), target, source)
}

/// Replace the subtree rooted at `index` with `replacement`.
pub fn mutate_at(a: &Tree, index: usize, replacement: &Tree) -> Result<(Tree, Span), ExprError> {
    let target = a.subtree_span(index)?;
    Ok((a.splice_unchecked(target, replacement.elements()), target))
}

pub fn subtree_mutation<R: Rng + ?Sized>(a: &Tree, n_features: usize, config: &GpConfig, rng: &mut R) -> (Tree, Span) {
    let index = rng.gen_range(0..a.len());
    let replacement = grow(config.init_max_depth, n_features, config, rng);
    mutate_at(a, index, &replacement).expect("index in range")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operator {
    Crossover,
    Mutation,
}

pub fn choose_operator<R: Rng + ?Sized>(config: &GpConfig, rng: &mut R) -> Operator {
    if rng.gen::<f64>() < config.p_crossover {
        Operator::Crossover
    } else {
        Operator::Mutation
    }
}

/// How an offspring was produced; spans refer to the first parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Lineage {
    pub operator: Operator,
    pub parent: usize,
    pub donor: Option<usize>,
    pub target: Span,
}

/// Produce one offspring from an evaluated population.
pub fn breed<R: Rng + ?Sized>(
    population: &[Individual],
    config: &GpConfig,
    n_features: usize,
    rng: &mut R,
) -> (Tree, Lineage) {
    let fitness: Vec<f64> = population.iter().map(|i| i.train_fitness).collect();
    breed_with(&fitness, population, config, n_features, rng)
}

fn breed_with<R: Rng + ?Sized>(
    fitness: &[f64],
    population: &[Individual],
    config: &GpConfig,
    n_features: usize,
    rng: &mut R,
) -> (Tree, Lineage) {
    let k = config.tournament_size();
    let operator = choose_operator(config, rng);
    let parent = tournament_select(fitness, k, rng);
    match operator {
        Operator::Crossover => {
            let donor = tournament_select(fitness, k, rng);
            let (child, target, _) = swap_crossover(&population[parent].genotype, &population[donor].genotype, rng);
            (child, Lineage { operator, parent, donor: Some(donor), target })
        }
        Operator::Mutation => {
            let (child, target) = subtree_mutation(&population[parent].genotype, n_features, config, rng);
            (child, Lineage { operator, parent, donor: None, target })
        }
    }
}

pub fn best_index(population: &[Individual]) -> usize {
    let fitness: Vec<f64> = population.iter().map(|i| i.train_fitness).collect();
    tournament_winner(&fitness, &(0..population.len()).collect::<Vec<_>>())
}

/// One generational step: every slot of the new population is an offspring
/// (unless elitism is enabled, in which case slot 0 keeps the previous best).
/// Selection reads training fitness only.
pub fn evolve_generation<R: Rng + ?Sized>(
    population: &[Individual],
    config: &GpConfig,
    train: &Dataset,
    test: &Dataset,
    rng: &mut R,
) -> Vec<Individual> {
    let fitness: Vec<f64> = population.iter().map(|i| i.train_fitness).collect();
    let mut next = Vec::with_capacity(config.population_size);
    if config.elitism {
        next.push(population[best_index(population)].clone());
    }
    while next.len() < config.population_size {
        let (child, _) = breed_with(&fitness, population, config, train.n_features(), rng);
        next.push(Individual::evaluate(child, train, test).expect("offspring only reference known features"));
    }
    next
}

pub fn initial_population<R: Rng + ?Sized>(
    config: &GpConfig,
    train: &Dataset,
    test: &Dataset,
    rng: &mut R,
) -> Vec<Individual> {
    ramped_half_and_half(config, train.n_features(), rng)
        .into_iter()
        .map(|t| Individual::evaluate(t, train, test).expect("initial trees only reference known features"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(s: &str) -> Tree {
        s.parse().unwrap()
    }

    #[test]
    fn full_depth_two_has_seven_nodes() {
        let cfg = GpConfig::default();
        for s in 0..20 {
            let tree = full(2, 3, &cfg, &mut rng(s));
            assert_eq!(tree.len(), 7);
            assert_eq!(tree.depth(), 2);
        }
    }

    #[test]
    fn grow_depth_two_has_function_root() {
        let cfg = GpConfig::default();
        for s in 0..200 {
            let d = grow(2, 3, &cfg, &mut rng(s)).depth();
            assert!((1..=2).contains(&d), "depth {d}");
        }
    }

    #[test]
    fn rhh_respects_max_depth() {
        let cfg = GpConfig::default();
        let pop = ramped_half_and_half(&cfg, 7, &mut rng(11));
        assert_eq!(pop.len(), 100);
        assert!(pop.iter().all(|t| t.depth() <= 5));
        assert!(pop.iter().any(|t| t.depth() == 5));
        assert!(pop.iter().all(|t| t.required_features() <= 7));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_fitness(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((rmse_fitness(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse_fitness(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535534).abs() < 1e-6);
        assert_eq!(rmse_fitness(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), rmse_fitness(&[3.0, 0.0], &[0.0, 4.0]).unwrap());
        assert!(rmse_fitness(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tournament_examples() {
        assert_eq!(tournament_winner(&[0.5, 0.2, 0.9], &[0, 2, 2, 0]), 0);
        assert_eq!(tournament_winner(&[0.5, 0.2, 0.9], &[0, 1, 2]), 1);
        assert_eq!(tournament_winner(&[1.0, 1.0, 1.0], &[2, 0, 1]), 2);
        let a = tournament_select(&[1.0; 10], 4, &mut rng(3));
        let b = tournament_select(&[1.0; 10], 4, &mut rng(3));
        assert_eq!(a, b);
    }

    #[test]
    fn tournament_size_rounding() {
        let cfg = GpConfig::default();
        assert_eq!(cfg.tournament_size(), 4);
        assert_eq!(GpConfig { population_size: 10, ..cfg.clone() }.tournament_size(), 2);
        assert_eq!(GpConfig { population_size: 500, ..cfg }.tournament_size(), 20);
    }

    #[test]
    fn crossover_on_single_node_takes_donor_subtree() {
        let a = t("x0");
        let b = t("(+ x1 (* x2 0.5))");
        for s in 0..20 {
            let (child, target, source) = swap_crossover(&a, &b, &mut rng(s));
            assert_eq!(target, Span::new(0, 1));
            assert_eq!(child, b.subtree(source).unwrap());
        }
        let (child, target, _) = swap_crossover(&b, &t("x1"), &mut rng(5));
        assert_eq!(child.elements()[target.start], Element::Feature(1));
    }

    #[test]
    fn mutation_hand_trace() {
        let (child, span) = mutate_at(&t("(+ x0 x0)"), 1, &t("x1")).unwrap();
        assert_eq!(span, Span::new(1, 2));
        assert_eq!(child, t("(+ x1 x0)"));
    }

    #[test]
    fn mutation_of_terminal_is_fresh_tree() {
        let cfg = GpConfig::default();
        for s in 0..50 {
            let (child, _) = subtree_mutation(&t("x0"), 3, &cfg, &mut rng(s));
            assert!(child.depth() <= 5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GpConfig::default().validate().is_ok());
        let bad = GpConfig { p_crossover: 0.5, p_mutation: 0.6, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(GpConfig { population_size: 1, ..Default::default() }.validate().is_err());
        assert!(GpConfig { init_max_depth: 1, ..Default::default() }.validate().is_err());
        assert!(GpConfig { constant_range: [1.0, -1.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_json_field_names() {
        let json = serde_json::to_value(GpConfig::default()).unwrap();
        for key in [
            "population_size",
            "generations",
            "p_crossover",
            "p_mutation",
            "tournament_pressure",
            "init_max_depth",
            "rng_seed",
            "constant_range",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let partial: GpConfig = serde_json::from_str(r#"{"p_crossover":0.2,"p_mutation":0.8}"#).unwrap();
        assert_eq!(partial.population_size, 100);
    }

    #[test]
    fn operator_frequencies_match_probabilities() {
        let cfg = GpConfig::default();
        let draws = 20_000;
        let mut r = rng(99);
        let hits = (0..draws).filter(|_| choose_operator(&cfg, &mut r) == Operator::Crossover).count() as f64;
        let (p, n) = (cfg.p_crossover, draws as f64);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((hits - n * p).abs() <= 3.0 * sigma, "hits {hits}");
    }
}

mod common;

use common::{random_inputs, random_tree};
use phenogp_core::data::{
    load_csv, monte_carlo_split, standardize, synthetic_dataset, write_csv, Dataset, StandardizeScope,
};
use phenogp_core::phenotype::{
    build_matrix, percentile_threshold, phenotype_semantics, rounds_to_zero, similarity, simplify, simplify_levels,
    ApproximationLevel,
};
use phenogp_core::{Span, Tree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEVELS: [f64; 5] = [0.0, 2.5, 5.0, 10.0, 20.0];

fn levels() -> Vec<ApproximationLevel> {
    LEVELS.iter().map(|&t| ApproximationLevel::new(t).unwrap()).collect()
}

/// A random tree with its inputs, drawn from a seed so shrinking stays cheap.
fn case(seed: u64, max_size: usize) -> (Tree, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..4);
    let n = rng.gen_range(1..32);
    (random_tree(&mut rng, max_size, d), random_inputs(&mut rng, n, d))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn canonical_form_round_trips(seed in any::<u64>(), max_size in 1usize..120) {
        let (tree, _) = case(seed, max_size);
        let text = tree.to_string();
        let parsed: Tree = text.parse().unwrap();
        prop_assert_eq!(&parsed, &tree);
        prop_assert_eq!(parsed.to_string(), text);
    }

    #[test]
    fn spans_partition_children(seed in any::<u64>(), max_size in 1usize..120) {
        let (tree, _) = case(seed, max_size);
        let spans = tree.spans();
        prop_assert_eq!(spans.len(), tree.len());
        prop_assert_eq!(spans[0], Span::new(0, tree.len()));
        for (i, span) in spans.iter().enumerate() {
            prop_assert_eq!(span.start, i);
            prop_assert!(span.end <= tree.len());
            let arity = tree.elements()[i].arity();
            let mut cursor = i + 1;
            for _ in 0..arity {
                cursor = spans[cursor].end;
            }
            prop_assert_eq!(cursor, span.end);
        }
        let leaves = tree.terminal_count();
        prop_assert_eq!(tree.len(), 2 * leaves - 1);
    }

    #[test]
    fn semantics_cover_every_node_and_stay_finite(seed in any::<u64>(), scale in prop::sample::select(vec![1.0, 1e150, 1e-300])) {
        let (tree, mut inputs) = case(seed, 80);
        inputs.iter_mut().flatten().for_each(|v| *v *= scale);
        let table = tree.evaluate(&inputs).unwrap();
        prop_assert_eq!(table.len(), tree.len());
        for node in table.iter() {
            prop_assert_eq!(node.len(), inputs[0].len());
            prop_assert!(node.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn replace_span_keeps_trees_valid(seed in any::<u64>(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let (tree, _) = case(seed, 60);
        let spans = tree.spans();
        let target = spans[a.index(spans.len())];
        let source = spans[b.index(spans.len())];
        match tree.replace_span(target, source) {
            Ok(out) => {
                prop_assert!(!source.contains(&target) || source == target);
                prop_assert_eq!(out.len(), tree.len() - target.len() + source.len());
                prop_assert!(Tree::new(out.elements().to_vec()).is_ok());
                prop_assert_eq!(&out.elements()[target.start..target.start + source.len()], &tree.elements()[source.start..source.end]);
            }
            Err(_) => prop_assert!(source.contains(&target) && source != target),
        }
    }

    #[test]
    fn simplification_only_shrinks(seed in any::<u64>()) {
        let (tree, inputs) = case(seed, 200);
        let sem = tree.evaluate(&inputs).unwrap();
        let reports = simplify_levels(&tree, &sem, &levels()).unwrap();
        for r in &reports {
            prop_assert!(r.phenotype_size <= tree.len());
            prop_assert_eq!(r.phenotype.len(), r.phenotype_size);
            let saved: usize = r.replacements.iter().map(|x| x.target.len() - x.source.len()).sum();
            prop_assert_eq!(r.phenotype_size, tree.len() - saved);
            for (i, a) in r.replacements.iter().enumerate() {
                prop_assert!(a.source.len() < a.target.len());
                prop_assert!(!a.source.contains(&a.target));
                for b in &r.replacements[i + 1..] {
                    prop_assert!(!a.target.overlaps(&b.target));
                }
            }
        }
    }

    #[test]
    fn percentile_is_monotone_in_t(seed in any::<u64>()) {
        let (tree, inputs) = case(seed, 200);
        let sem = tree.evaluate(&inputs).unwrap();
        let matrix = build_matrix(&tree, &sem).unwrap();
        let mut previous = 0.0;
        for t in [0.5, 2.5, 5.0, 10.0, 20.0, 50.0, 99.0] {
            if let Some(p) = percentile_threshold(&matrix, ApproximationLevel::new(t).unwrap()) {
                prop_assert!(p >= previous);
                previous = p;
            }
        }
    }

    #[test]
    fn phenotype_semantics_equal_reevaluation(seed in any::<u64>()) {
        let (tree, inputs) = case(seed, 150);
        let sem = tree.evaluate(&inputs).unwrap();
        for r in simplify_levels(&tree, &sem, &levels()).unwrap() {
            let fresh = r.phenotype.predict(&inputs).unwrap();
            let cached = phenotype_semantics(&tree, &sem, &r.replacements);
            prop_assert_eq!(fresh, cached);
        }
    }

    #[test]
    fn exact_phenotype_is_stable_under_resimplification(seed in any::<u64>()) {
        let (tree, inputs) = case(seed, 150);
        let sem = tree.evaluate(&inputs).unwrap();
        let first = simplify(&tree, &sem, ApproximationLevel::EXACT).unwrap();
        let sem1 = first.phenotype.evaluate(&inputs).unwrap();
        let second = simplify(&first.phenotype, &sem1, ApproximationLevel::EXACT).unwrap();
        prop_assert!(second.phenotype_size <= first.phenotype_size);
        let drift = similarity(sem1.root(), &second.phenotype.predict(&inputs).unwrap()).unwrap();
        prop_assert!(rounds_to_zero(drift));
    }

    #[test]
    fn split_is_deterministic_and_leak_free(seed in any::<u64>(), n in 4usize..80, perturb in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = synthetic_dataset("friedman", n, 0.1, &mut rng).unwrap();
        let a = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.train_rows.len() + a.test_rows.len(), n);

        // Changing a test row must not move any training statistic.
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut r: Vec<f64> = ds.columns().iter().map(|c| c[i]).collect();
            r.push(ds.targets()[i]);
            r
        }).collect();
        let victim = a.test_rows[0];
        rows[victim].iter_mut().for_each(|v| *v += perturb);
        let shifted = Dataset::from_rows("shifted", "mem", &rows).unwrap();
        let c = monte_carlo_split(&shifted, 0.7, StandardizeScope::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a.standardization, &c.standardization);
        prop_assert_eq!(a.train.columns(), c.train.columns());
        prop_assert_eq!(a.train.targets(), c.train.targets());
    }

    #[test]
    fn standardized_train_columns_are_unit_scaled(seed in any::<u64>(), n in 6usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = synthetic_dataset("friedman", n, 0.1, &mut rng).unwrap();
        let split = monte_carlo_split(&ds, 0.7, StandardizeScope::Train, &mut rng).unwrap();
        let m = split.train.n_rows() as f64;
        for col in split.train.columns().iter().chain(std::iter::once(&split.train.targets().to_vec())) {
            let mean = col.iter().sum::<f64>() / m;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
        }
        let again = standardize(split.clone());
        for (x, y) in again.train.columns().iter().flatten().zip(split.train.columns().iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn slump_shaped_csv_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slump.csv");
    let mut text = String::from("Cement,Slag,Fly ash,Water,SP,Coarse Aggr.,Fine Aggr.,SLUMP(cm)\n");
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..103 {
        let row: Vec<String> = (0..8).map(|_| format!("{:.1}", rng.gen_range(0.0..1000.0))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    let ds = load_csv(&path).unwrap();
    assert_eq!((ds.n_rows(), ds.n_features()), (103, 7));

    let copy = dir.path().join("copy.csv");
    write_csv(&ds, &copy).unwrap();
    assert_eq!(load_csv(&copy).unwrap().columns(), ds.columns());
}

//! Genotype to phenotype extraction.
//!
//! Every subtree's output vector is compared with every other subtree's
//! output. The largest subtree that has a smaller equivalent partner is
//! replaced by its smallest such partner, everything it contained is dropped
//! from consideration, and the loop continues with the next largest. With
//! `t = 0` two subtrees are equivalent when their distance rounds to zero at
//! five decimals; with `t > 0` the threshold is the `t`-th percentile of the
//! tree's own pairwise distance distribution.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::Individual;
use crate::expr::{Element, SemanticsTable, Span, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhenotypeError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("semantics table has {table} entries but tree has {tree} nodes")]
    SemanticsMismatch { table: usize, tree: usize },
    #[error("approximation level must lie in [0, 100), got {0}")]
    InvalidLevel(f64),
}

/// Decimal places kept before testing a distance for zero.
pub const ROUNDING_DECIMALS: i32 = 5;

/// Distance between two output vectors.
pub type Distance = fn(&[f64], &[f64]) -> f64;

/// Mean absolute deviation.
#[inline]
pub fn mad(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y).abs()).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += (x[l] - y[l]).abs();
        }
    }
    (acc[0] + acc[1] + acc[2] + acc[3] + tail) / a.len() as f64
}

pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, PhenotypeError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PhenotypeError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(mad(a, b))
}

/// Round half to even at [`ROUNDING_DECIMALS`] places and compare with zero.
#[inline]
pub fn rounds_to_zero(d: f64) -> bool {
    const SCALE: f64 = 1e5;
    const _: () = assert!(ROUNDING_DECIMALS == 5);
    (d * SCALE).round_ties_even() == 0.0
}

/// Percentile `t` in `[0, 100)`; zero requests the exact phenotype.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ApproximationLevel(f64);

impl ApproximationLevel {
    pub const EXACT: ApproximationLevel = ApproximationLevel(0.0);

    pub fn new(t: f64) -> Result<Self, PhenotypeError> {
        if t.is_finite() && (0.0..100.0).contains(&t) {
            Ok(ApproximationLevel(t))
        } else {
            Err(PhenotypeError::InvalidLevel(t))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_exact(self) -> bool {
        self.0 == 0.0
    }

    /// Label used in metric files: `t0`, `t2.5`, `t10`, ...
    pub fn label(self) -> String {
        format!("t{}", self.0)
    }
}

impl TryFrom<f64> for ApproximationLevel {
    type Error = PhenotypeError;
    fn try_from(t: f64) -> Result<Self, Self::Error> {
        ApproximationLevel::new(t)
    }
}

impl From<ApproximationLevel> for f64 {
    fn from(l: ApproximationLevel) -> f64 {
        l.0
    }
}

/// Pairwise subtree distances with span metadata.
///
/// Subtrees with bit-identical outputs share a semantic class; the strict
/// lower triangle is stored over classes, which holds the same information
/// as the subtree triangle (same-class pairs are at distance zero).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    spans: Vec<Span>,
    class_of: Vec<usize>,
    class_sizes: Vec<usize>,
    /// Row `a` holds `d(a, b)` for classes `b < a`, starting at offset `a (a - 1) / 2`.
    class_distances: Vec<f64>,
    distribution: OnceLock<Vec<(f64, usize)>>,
}

impl SimilarityMatrix {
    pub fn subtrees(&self) -> usize {
        self.spans.len()
    }

    /// `S (S - 1) / 2` for `S` subtrees.
    pub fn pair_count(&self) -> usize {
        let s = self.spans.len();
        s * (s - 1) / 2
    }

    pub fn classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn size(&self, root: usize) -> usize {
        self.spans[root].len()
    }

    /// True when the subtree at `outer` contains the subtree at `inner`.
    pub fn contains(&self, outer: usize, inner: usize) -> bool {
        self.spans[outer].contains(&self.spans[inner])
    }

    #[inline]
    fn class_distance(&self, a: usize, b: usize) -> f64 {
        match a.cmp(&b) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => self.class_distances[a * (a - 1) / 2 + b],
            std::cmp::Ordering::Less => self.class_distances[b * (b - 1) / 2 + a],
        }
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.class_distance(self.class_of[i], self.class_of[j])
    }

    /// Every stored pair `(i, j, d)` with `i > j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (1..self.subtrees()).flat_map(move |i| (0..i).map(move |j| (i, j, self.distance(i, j))))
    }

    /// The pair distance distribution as `(distance, multiplicity)` entries,
    /// sorted by distance.
    pub fn distribution(&self) -> &[(f64, usize)] {
        self.distribution.get_or_init(|| {
            let mut d = self.weighted_distances();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            d
        })
    }

    fn weighted_distances(&self) -> Vec<(f64, usize)> {
        let k = self.classes();
        let mut out = Vec::with_capacity(k * (k - 1) / 2 + 1);
        let same: usize = self.class_sizes.iter().map(|&c| c * (c - 1) / 2).sum();
        if same > 0 {
            out.push((0.0, same));
        }
        for a in 1..k {
            for b in 0..a {
                out.push((self.class_distance(a, b), self.class_sizes[a] * self.class_sizes[b]));
            }
        }
        out
    }
}

pub fn build_matrix(tree: &Tree, semantics: &SemanticsTable) -> Result<SimilarityMatrix, PhenotypeError> {
    build_matrix_with(tree, semantics, mad)
}

/// Rows are filled one class at a time, so peak memory is the class
/// distance triangle itself.
pub fn build_matrix_with(
    tree: &Tree,
    semantics: &SemanticsTable,
    distance: Distance,
) -> Result<SimilarityMatrix, PhenotypeError> {
    let s = tree.len();
    if semantics.len() != s {
        return Err(PhenotypeError::SemanticsMismatch { table: semantics.len(), tree: s });
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut representatives: Vec<usize> = Vec::new();
    let mut class_sizes: Vec<usize> = Vec::new();
    let class_of: Vec<usize> = (0..s)
        .map(|i| {
            let key: Vec<u64> = semantics.get(i).iter().map(|v| v.to_bits()).collect();
            let next = representatives.len();
            let class = *index.entry(key).or_insert(next);
            if class == next {
                representatives.push(i);
                class_sizes.push(0);
            }
            class_sizes[class] += 1;
            class
        })
        .collect();
    let k = representatives.len();
    let mut class_distances = Vec::with_capacity(k * (k - 1) / 2);
    for a in 1..k {
        let row = semantics.get(representatives[a]);
        class_distances.extend(representatives[..a].iter().map(|&r| distance(row, semantics.get(r))));
    }
    Ok(SimilarityMatrix { spans: tree.spans(), class_of, class_sizes, class_distances, distribution: OnceLock::new() })
}

/// Nearest-rank percentile: the `ceil(t/100 * P)`-th smallest of the `P`
/// pair distances. `None` when the matrix has no pairs.
pub fn percentile_threshold(matrix: &SimilarityMatrix, level: ApproximationLevel) -> Option<f64> {
    sorted_nearest_rank(matrix.distribution(), level.value())
}

pub(crate) fn nearest_rank_index(p: usize, t: f64) -> usize {
    ((t * p as f64) / 100.0).ceil().clamp(1.0, p as f64) as usize
}

#[cfg(test)]
fn weighted_nearest_rank(mut values: Vec<(f64, usize)>, t: f64) -> Option<f64> {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted_nearest_rank(&values, t)
}

/// `values` sorted ascending by distance.
fn sorted_nearest_rank(values: &[(f64, usize)], t: f64) -> Option<f64> {
    let p: usize = values.iter().map(|v| v.1).sum();
    if p == 0 {
        return None;
    }
    let rank = nearest_rank_index(p, t);
    let mut seen = 0;
    for &(d, w) in values {
        seen += w;
        if seen >= rank {
            return Some(d);
        }
    }
    unreachable!("rank never exceeds the total weight")
}

/// Acceptance rule for a pair distance at a given level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    /// `p(t)`; `None` for the exact level or when no pairs exist.
    pub percentile: Option<f64>,
}

impl Threshold {
    pub fn for_level(matrix: &SimilarityMatrix, level: ApproximationLevel) -> Self {
        let percentile = if level.is_exact() { None } else { percentile_threshold(matrix, level) };
        Threshold { percentile }
    }

    /// Pairs equal at five decimals always qualify; approximate levels
    /// additionally accept anything within `p(t)`.
    #[inline]
    pub fn accepts(&self, d: f64) -> bool {
        rounds_to_zero(d) || self.percentile.is_some_and(|p| d <= p)
    }
}

/// All `(i, j)` with `i > j` whose distance passes the level's threshold.
pub fn equivalent_pairs(matrix: &SimilarityMatrix, level: ApproximationLevel) -> Vec<(usize, usize)> {
    let threshold = Threshold::for_level(matrix, level);
    matrix.pairs().filter(|&(_, _, d)| threshold.accepts(d)).map(|(i, j, _)| (i, j)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    #[serde(with = "span_pair")]
    pub target: Span,
    #[serde(with = "span_pair")]
    pub source: Span,
}

mod span_pair {
    use super::Span;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(span: &Span, s: S) -> Result<S::Ok, S::Error> {
        [span.start, span.end].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Span, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(Span::new(start, end))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplificationReport {
    pub t: ApproximationLevel,
    /// `p(t)` used for this level, absent for the exact level.
    pub threshold: Option<f64>,
    pub phenotype: Tree,
    pub replacements: Vec<Replacement>,
    pub original_size: usize,
    pub phenotype_size: usize,
    pub smad_vs_genotype: f64,
    /// Phenotype output over the instances the semantics were computed on.
    #[serde(skip)]
    pub phenotype_semantics: Vec<f64>,
}

/// Greedy largest-first replacement over the matrix. Spans refer to the
/// original tree and the returned targets are pairwise disjoint.
pub fn select_replacements(matrix: &SimilarityMatrix, threshold: Threshold) -> Vec<Replacement> {
    let s = matrix.subtrees();
    let spans = matrix.spans();
    // Ties on size go to the lowest node index in both directions.
    let mut by_size_desc: Vec<usize> = (0..s).collect();
    by_size_desc.sort_by(|&a, &b| spans[b].len().cmp(&spans[a].len()).then(a.cmp(&b)));
    let mut by_size_asc: Vec<usize> = (0..s).collect();
    by_size_asc.sort_by(|&a, &b| spans[a].len().cmp(&spans[b].len()).then(a.cmp(&b)));

    let mut removed = vec![false; s];
    let mut out = Vec::new();
    for &target in &by_size_desc {
        if removed[target] {
            continue;
        }
        let target_size = spans[target].len();
        if target_size == 1 {
            break;
        }
        let partner = by_size_asc.iter().take_while(|&&j| spans[j].len() < target_size).copied().find(|&j| {
            !removed[j] && !spans[j].contains(&spans[target]) && threshold.accepts(matrix.distance(target, j))
        });
        if let Some(source) = partner {
            let span = spans[target];
            out.push(Replacement { target: span, source: spans[source] });
            removed[span.start..span.end].fill(true);
        }
    }
    out
}

/// Apply replacements with disjoint targets in one left-to-right pass.
pub fn materialize(tree: &Tree, replacements: &[Replacement]) -> Tree {
    let mut ordered: Vec<&Replacement> = replacements.iter().collect();
    ordered.sort_by_key(|r| r.target.start);
    let el = tree.elements();
    let mut out: Vec<Element> = Vec::with_capacity(tree.len());
    let mut cursor = 0;
    for r in ordered {
        debug_assert!(r.target.start >= cursor, "targets overlap");
        out.extend_from_slice(&el[cursor..r.target.start]);
        out.extend_from_slice(&el[r.source.start..r.source.end]);
        cursor = r.target.end;
    }
    out.extend_from_slice(&el[cursor..]);
    Tree::from_valid(out)
}

/// Output of the phenotype, rebuilt from cached subtree outputs: replaced
/// positions take their source's vector and only the ancestors of targets
/// are recomputed.
pub fn phenotype_semantics(tree: &Tree, semantics: &SemanticsTable, replacements: &[Replacement]) -> Vec<f64> {
    if replacements.is_empty() {
        return semantics.root().to_vec();
    }
    let spans = tree.spans();
    let s = tree.len();
    let mut source_of: Vec<Option<usize>> = vec![None; s];
    let mut dirty = vec![false; s];
    for r in replacements {
        source_of[r.target.start] = Some(r.source.start);
    }
    for i in 0..s {
        dirty[i] = replacements.iter().any(|r| spans[i].contains(&r.target) && spans[i] != r.target);
    }
    let n = semantics.instances();
    let mut computed: Vec<Option<Vec<f64>>> = vec![None; s];
    for i in (0..s).rev() {
        if !dirty[i] {
            continue;
        }
        let Element::Function(op) = tree.elements()[i] else { unreachable!("terminals contain no targets") };
        let left = i + 1;
        let right = spans[left].end;
        let mut out = vec![0.0; n];
        {
            let a = resolved(left, semantics, &source_of, &computed);
            let b = resolved(right, semantics, &source_of, &computed);
            for k in 0..n {
                out[k] = op.apply(a[k], b[k]);
            }
        }
        computed[i] = Some(out);
    }
    resolved(0, semantics, &source_of, &computed).to_vec()
}

fn resolved<'a>(
    node: usize,
    semantics: &'a SemanticsTable,
    source_of: &[Option<usize>],
    computed: &'a [Option<Vec<f64>>],
) -> &'a [f64] {
    if let Some(src) = source_of[node] {
        semantics.get(src)
    } else if let Some(v) = &computed[node] {
        v
    } else {
        semantics.get(node)
    }
}

fn report_from(
    tree: &Tree,
    semantics: &SemanticsTable,
    level: ApproximationLevel,
    threshold: Threshold,
    replacements: Vec<Replacement>,
) -> SimplificationReport {
    let phenotype = materialize(tree, &replacements);
    let phenotype_semantics = phenotype_semantics(tree, semantics, &replacements);
    SimplificationReport {
        t: level,
        threshold: threshold.percentile,
        original_size: tree.len(),
        phenotype_size: phenotype.len(),
        smad_vs_genotype: mad(semantics.root(), &phenotype_semantics),
        phenotype,
        replacements,
        phenotype_semantics,
    }
}

pub fn simplify(
    tree: &Tree,
    semantics: &SemanticsTable,
    level: ApproximationLevel,
) -> Result<SimplificationReport, PhenotypeError> {
    Ok(simplify_levels(tree, semantics, &[level])?.remove(0))
}

/// Simplify at several levels sharing one similarity matrix.
pub fn simplify_levels(
    tree: &Tree,
    semantics: &SemanticsTable,
    levels: &[ApproximationLevel],
) -> Result<Vec<SimplificationReport>, PhenotypeError> {
    let matrix = build_matrix(tree, semantics)?;
    Ok(levels
        .iter()
        .map(|&level| {
            let threshold = Threshold::for_level(&matrix, level);
            let replacements = select_replacements(&matrix, threshold);
            report_from(tree, semantics, level, threshold, replacements)
        })
        .collect())
}

/// The exact level followed by the requested levels, deduplicated, ascending.
pub fn with_exact_level(levels: &[ApproximationLevel]) -> Vec<ApproximationLevel> {
    let mut all = vec![ApproximationLevel::EXACT];
    all.extend_from_slice(levels);
    all.sort_by(|a, b| a.value().total_cmp(&b.value()));
    all.dedup();
    all
}

/// Reports for every individual at every level (the exact level always
/// included, first). Genotypes are only read.
pub fn extract_population_phenotypes<C: AsRef<[f64]> + Sync>(
    population: &[Individual],
    levels: &[ApproximationLevel],
    train_columns: &[C],
) -> Vec<Vec<SimplificationReport>> {
    let levels = with_exact_level(levels);
    // Identical genotypes share one extraction.
    let mut first_of: HashMap<&Tree, usize> = HashMap::new();
    let mut unique: Vec<&Tree> = Vec::new();
    let slot: Vec<usize> = population
        .iter()
        .map(|ind| {
            *first_of.entry(&ind.genotype).or_insert_with(|| {
                unique.push(&ind.genotype);
                unique.len() - 1
            })
        })
        .collect();
    let one = |tree: &&Tree| {
        let sem = tree.evaluate(train_columns).expect("population was evaluated on these inputs");
        simplify_levels(tree, &sem, &levels).expect("table covers the tree")
    };
    let reports: Vec<Vec<SimplificationReport>> = unique.iter().map(one).collect();
    slot.into_iter().map(|k| reports[k].clone()).collect()
}

//! Tree genetic programming for symbolic regression with genotype to
//! phenotype extraction.
//!
//! * [`expr`]: flat prefix-order trees, parsing, cached vectorized evaluation.
//! * [`evolution`]: initialization, selection, variation, generational loop.
//! * [`phenotype`]: exact and percentile-approximate simplification.
//! * [`data`]: CSV ingestion, Monte-Carlo splits, standardization, synthetic problems.
//! * [`experiment`]: runs, per-generation population metrics, batch scheduling.

pub mod data;
pub mod evolution;
pub mod experiment;
pub mod expr;
pub mod phenotype;

pub use data::{Dataset, SplitDataset, StandardizeScope};
pub use evolution::{GpConfig, Individual};
pub use experiment::{GenerationMetrics, RunConfig, RunManifest};
pub use expr::{Element, Op, SemanticsTable, Span, Tree};
pub use phenotype::{ApproximationLevel, SimilarityMatrix, SimplificationReport};

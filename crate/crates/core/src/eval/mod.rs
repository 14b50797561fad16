//! Metrics over embedding populations and validation of rubric judge
//! reports.
//!
//! Embeddings come from a pluggable [`Featurizer`]; the built-in one is a
//! seeded random linear map, enough to compare populations within this crate
//! but not comparable across extractors. KL is reported as
//! `KL(reference || generated)`.

mod featurize;
mod judge;
mod metrics;
mod report;

pub use featurize::{Featurizer, LinearFeaturizer, SoftmaxClassifier};
pub use judge::{aggregate_judges, parse_judge, JudgeClient, JudgeMeans, JudgeReport, AXES};
pub use metrics::{
    cosine_alignment, density_coverage, frechet_distance, inception_score, kl_divergence, ClassDistribution,
    EmbeddingSet,
};
pub use report::{evaluate, EvalInputs, MetricReport, Extractors, REPORT_KEYS};

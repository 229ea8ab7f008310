//! Multiple-choice benchmark, ablation report, and rating metrics.

mod benchmark;
mod heldout;
mod kappa;
mod ratings;

pub use benchmark::{
    ablation_report, answer_mc, benchmark_hash, run_benchmark, size_tag, AblationReport, AblationRow,
    BenchmarkResult, McAnswer, McMode, QuestionOutcome, TemperamentAccuracy, MAX_REASONING_TOKENS,
    REFERENCE_ACCURACY,
};
pub use heldout::{held_out_stats, HeldOutStats};
pub use kappa::{cohen_kappa, pairwise_mean_kappa};
pub use ratings::{
    aggregate_ratings, read_ratings, synthetic_ratings, write_ratings, Dimension, RatingRecord, RatingRow,
    RatingTable,
};

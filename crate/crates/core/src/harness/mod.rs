//! Configuration, metrics and end-to-end workflows behind the `cmfd` CLI.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod selftest;

pub use config::{Aggregation, RunConfig, CONFIG_FILE};
pub use metrics::{aggregate, class_metrics, ClassMetrics, EvalMetrics};
pub use pipeline::{
    evaluate_corpus, evaluate_dirs, load_corpus, robustness_sweep, write_sweep, CorpusItem, Detection, Detector, EvalReport,
    SweepRow,
};
pub use selftest::{run_selftest, Check};

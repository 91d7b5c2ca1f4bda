//! File formats, evaluation, visualisation, run orchestration and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod eval;
pub mod metrics;
pub mod records;
pub mod run;
pub mod tensorfile;
pub mod viz;

pub use checkpoint::Checkpoint;
pub use eval::{eval_model, evaluate, miou, AttentionSource, BlurredTruth, EvalReport, ModelSource};
pub use metrics::MetricsRecord;
pub use run::{ablation_matrix, ablation_rows, run_training, train};

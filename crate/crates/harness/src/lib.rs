//! Fine-tuning, evaluation, checkpoints and dataset I/O around the
//! `tabimg-core` model, plus the pieces of the `tabimg` command line.

// `!(x > 0.0)` is also true for NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod io;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, RunConfig};
pub use error::{HarnessError, Result};
pub use eval::{EvalReport, Metric};
pub use finetune::{FinetuneConfig, FinetuneMode, FinetuneOutcome};

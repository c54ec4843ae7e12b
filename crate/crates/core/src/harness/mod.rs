//! Task sequencing, the per-task training phases, evaluation and metrics.

mod config;
mod drift;
mod learner;
mod metrics;
mod run;
mod stream;

pub use config::{DataSource, EncoderMode, HeadConfig, RunConfig};
pub use drift::{drift_table, gram_cka, kernel_cka, linear_cka, rbf_gram, representation_drift, RepresentationDrift};
pub use learner::{Encoder, Evaluation, Learner, TaskReport};
pub use metrics::{average_accuracy, average_forgetting, ScoreMatrix};
pub use run::{aggregate, build_backbone, run_stream, run_with, Aggregate, MeanStd, RunManifest, RunOutput, Timings};
pub use stream::{Split, Task, TaskStream};

//! Dataset sources and run configuration parsing.

mod config;
mod embedding;
mod synthetic;

use std::path::Path;

pub use config::{
    config_from_value, config_keys, defaults_value, get_path, merge, parse_run_config, parse_run_config_str, preset,
    resolve_value, set_path, PRESETS,
};
pub use embedding::{read_embeddings, write_embeddings, Dtype, EmbeddingFile, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::harness::{DataSource, RunConfig, Split, TaskStream};
use crate::kernel::Rng;

/// The task stream a configuration describes for one run seed.
pub fn load_stream(config: &RunConfig, seed: u64) -> Result<TaskStream> {
    match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec, seed),
        DataSource::Embeddings {
            train,
            test,
            classes_per_task,
        } => {
            let tr = read_embeddings(Path::new(train))?;
            let te = read_embeddings(Path::new(test))?;
            if tr.dim() != te.dim() || tr.num_classes != te.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "train ({} dims, {} classes) and test ({} dims, {} classes) disagree",
                    tr.dim(),
                    tr.num_classes,
                    te.dim(),
                    te.num_classes
                )));
            }
            let mut order: Vec<usize> = (0..tr.num_classes).collect();
            Rng::new(seed).split("class-order").shuffle(&mut order);
            TaskStream::from_labeled(
                &Split::new(tr.features, tr.labels)?,
                &Split::new(te.features, te.labels)?,
                &order,
                *classes_per_task,
            )
        }
    }
}

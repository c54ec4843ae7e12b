//! Numeric substrate: tensors, stable reductions, seeded streams, Adam.

mod adam;
mod ops;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState, CosineSchedule};
pub use ops::{huber, huber_grad, logsumexp, softmax, softmax_into};
pub use rng::{sample_gaussian, Rng};
pub use tensor::{cosine, debug_checks, dot, set_debug_checks, Precision, Tensor};
pub(crate) use tensor::{matmul_into, Fnv};

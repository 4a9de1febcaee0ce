//! Tensors, parameters, the differentiation tape and the optimizer.

pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{ConvMap, Grads, Graph, Segments, Var};
pub use optim::{AdamWConfig, ClipConfig, ClipReport, GradMap, OptimizerState};
pub use params::{InitRule, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic generator.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Multi-level contrastive pretraining and multi-representation ensembles
//! for few-shot image classification.

pub mod augment;
pub mod checkpoint;
pub mod encoders;
pub mod episodes;
pub mod error;
pub mod experiment;
pub mod fewshot;
pub mod graph;
pub mod kernels;
pub mod mlcl;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for item `index` of a named `stream` under `seed`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

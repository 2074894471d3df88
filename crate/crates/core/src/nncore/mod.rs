//! Minimal dense reverse-mode differentiation: arrays, a tape, named
//! parameters with Adam, and a checkpoint container.

mod array;
mod checkpoint;
mod params;
mod tape;

pub use array::DenseArray;
pub(crate) use array::gemm;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use params::{clip_grad_norm, grad_norm, ParamSet, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub(crate) use tape::elu_slice;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use rand::Rng as _;

/// Affine weights uniform in `±sqrt(1/fan_in)`, biases zero.
pub fn init_affine(rng: &mut crate::Rng, fan_in: usize, fan_out: usize) -> (DenseArray, DenseArray) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    (
        DenseArray::from_raw(vec![fan_in, fan_out], w),
        DenseArray::zeros(&[fan_out]),
    )
}

//! Parameterized layers. Each layer owns only its dotted name prefix and
//! hyperparameters; tensors live in a [`ParamStore`](crate::ParamStore) under
//! `<prefix>.<field>`.

mod conv;
mod linear;
mod norm;

pub use conv::{mid_channels, Conv2Plus1dLayer, Conv2dLayer, Conv3dLayer};
pub use linear::Linear;
pub use norm::{BatchNormLayer, BN_EPSILON, BN_MOMENTUM};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Real, Tensor};

/// Whether normalization layers use batch statistics (and update their
/// running averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform `±sqrt(6 / fan_in)` weights (He-uniform).
pub(crate) fn fan_in_uniform<S: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, bound, rng)
}

pub(crate) fn uniform<S: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape.to_vec(), |_| S::cast_from(dist.sample(rng)))
}

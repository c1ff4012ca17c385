//! Invertible transforms and their composition into the conditional
//! multi-scale decoder.
//!
//! Every transform maps `x -> (y, logdet)` in the forward direction and
//! `y -> (x, -logdet)` in the inverse direction, with `logdet` reported per
//! example as an `[n]` tensor.

mod actnorm;
mod coupling;
mod invconv;
pub(crate) mod linalg;
mod multiscale;
mod split;
mod squeeze;
mod step;

pub use actnorm::ActNorm;
pub use coupling::{scale_transform, Coupling, CouplingSpec};
pub use invconv::InvConv;
pub use multiscale::{keep_after_factor_out, LatentPart, MultiScaleFlow, MultiScaleSpec};
pub use split::{merge_channels, merge_tensor, split_channels, split_tensor, SplitPattern};
pub use squeeze::{squeeze, squeeze_tensor, unsqueeze, unsqueeze_tensor};
pub use step::FlowStep;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Gaussian tensor with the given standard deviation.
pub(crate) fn normal_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::lit(v * std)
    })
}

//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `Vec<T>` described by a
//! [`Layout`]; layers only remember offsets into it. Gradients use the same
//! layout, which keeps optimizers, checksums, serialization and finite-difference
//! checks trivial.

mod act;
mod blob;
mod conv;
mod layout;
mod linear;
mod norm;
mod optim;

pub use blob::{load_params, save_params, ParamBlob};
pub use act::{gelu, gelu_grad, mish, mish_grad, silu, silu_grad, Activation};
pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d};
pub use layout::{Layout, ParamEntry};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use optim::AdamW;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// Fill with `U(-bound, bound)`.
pub fn fill_uniform<T: Scalar, R: Rng>(dst: &mut [T], bound: f64, rng: &mut R) {
    if bound == 0.0 {
        dst.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let dist = Uniform::new(-bound, bound).expect("valid uniform bounds");
    for v in dst {
        *v = T::lit(dist.sample(rng));
    }
}

/// Fill with `N(0, std²)`.
pub fn fill_normal<T: Scalar, R: Rng>(dst: &mut [T], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("valid normal std");
    for v in dst {
        *v = T::lit(dist.sample(rng));
    }
}

/// Central finite-difference gradient of `f` at `params`, used by gradient checks.
pub fn finite_difference<F>(params: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max relative error between two gradients, `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Norm-wise relative error `‖a−b‖₂ / max(‖a‖₂, ‖b‖₂)`.
pub fn relative_error_norm(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

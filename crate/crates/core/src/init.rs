//! Parameter initializers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numeric::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Normal samples rejected outside two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 2.0 {
            break T::lit(v * std);
        }
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}

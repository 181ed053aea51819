use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Normal { mean: f64, std: f64 },
    Constant(f64),
}

impl Init {
    /// N(0, 0.02), the DCGAN convention.
    pub const DCGAN: Init = Init::Normal { mean: 0.0, std: 0.02 };
    /// N(1, 0.02) for normalizer scales.
    pub const DCGAN_SCALE: Init = Init::Normal { mean: 1.0, std: 0.02 };

    pub fn tensor<F: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> ArrayD<F> {
        match *self {
            Init::Normal { mean, std } => gaussian(shape, mean, std, rng),
            Init::Constant(c) => ArrayD::from_elem(IxDyn(shape), F::lit(c)),
        }
    }
}

pub fn gaussian<F: Scalar, R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> ArrayD<F> {
    let dist = Normal::new(mean, std).expect("finite standard deviation");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(dist.sample(rng)))
}

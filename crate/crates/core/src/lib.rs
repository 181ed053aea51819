//! Conditional-GAN colourisation in CIE Lab.
//!
//! A U-Net generator maps the lightness channel of an image to its two
//! chrominance channels. It is trained against spectrally normalized,
//! multi-scale PatchGAN discriminators with a non-saturating adversarial
//! loss plus an L1 regression term. Layers mix instance and batch
//! normalization per a configurable schedule.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod colorspace;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Generator32 = generator::Generator<f32>;
pub type Generator64 = generator::Generator<f64>;
pub type MultiScaleDiscriminator32 = discriminator::MultiScaleDiscriminator<f32>;
pub type MultiScaleDiscriminator64 = discriminator::MultiScaleDiscriminator<f64>;
pub type LabImage32 = colorspace::LabImage<f32>;
pub type LabImage64 = colorspace::LabImage<f64>;

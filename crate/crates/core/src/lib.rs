//! Deformable image registration with test-time-trained, multi-scale
//! residual displacement fields.
//!
//! A small convolutional network predicts a displacement field for an image
//! pair and is optimised on that very pair (test-time training) against a
//! local cross-correlation similarity plus a smoothness penalty. Coarse-to-fine
//! scales each estimate a residual field on top of the previous scale's
//! aggregated field.
//!
//! Numeric code is generic over [`Real`] (`f32`/`f64`); the `*32`/`*64`
//! aliases below name the concrete instantiations.

pub mod error;
pub mod evalkit;
pub mod grid;
pub mod loss;
pub mod multiscale;
pub mod optim;
pub mod prep;
pub mod regnet;
pub mod scalar;
pub mod warp;

pub use error::{RegError, Result};
pub use grid::{Dims, DisplacementField, Image, Mask, Scale};
pub use scalar::Real;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Field32 = DisplacementField<f32>;
pub type Field64 = DisplacementField<f64>;
pub type NetParams32 = regnet::NetParams<f32>;
pub type NetParams64 = regnet::NetParams<f64>;

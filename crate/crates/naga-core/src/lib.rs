//! Core library for the Naga time-series forecaster.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense f64 tensors (rank 1 to 3) and the forward ops.
//! * [`rng`]: seeded, platform-stable random streams.
//! * [`tape`]: reverse-mode autodiff over the tensor ops, plus a
//!   finite-difference oracle for gradient checking.
//! * [`vedic`]: the bilinear time-mirrored encoder and its closed-form
//!   gradients.
//! * [`mamba2`]: the gated convolutional sequence block.
//! * [`model`]: encoder/block/head assembly into a forecasting model.
//! * [`checkpoint`]: bit-exact model serialization.
//! * [`train`]: Adam, early stopping, and the training loop.
//! * [`data`]: CSV ingestion, splits, normalization, windowing, and
//!   synthetic generators.
//! * [`theory`]: exact-construction and capacity-separation machinery.
//! * [`verify`]: the self-check battery behind `naga verify`.

pub mod checkpoint;
pub mod data;
pub mod mamba2;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod vedic;
pub mod verify;

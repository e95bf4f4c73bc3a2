//! Kernel point convolutions for 3D point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays with define-by-run reverse-mode differentiation
//! - [`kernelgeo`]: multi-shell kernel point dispositions
//! - [`sampling`]: stacked batches, grid pooling and truncated radius neighbors
//! - [`kpops`]: the KPConv / KPConvD / KPConvX / KPInv operator family
//! - [`network`]: inverted-bottleneck blocks and the S/L architectures
//! - [`train`]: AdamW, losses, augmentations, synthetic data and voting
//! - [`bench`]: operation counters and timing sweeps
//! - [`io`]: ASCII PLY files

pub mod bench;
pub mod error;
pub mod io;
pub mod kernelgeo;
pub mod kpops;
pub mod network;
pub mod parallel;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{KpxError, Result};
pub use tensor::{Real, Tensor};

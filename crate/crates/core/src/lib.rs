//! Volumetric boundary detection with deeply supervised 3D networks.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: rank-5 tensors, 3D kernels and a differentiation tape.
//! - [`layers`]: mixing layers, side outputs and weighted fusion.
//! - [`nets`]: HED-3D and I2I-3D assembly, forward passes and checkpoints.
//! - [`train`]: cross-entropy losses, SGD with momentum and the curriculum.
//! - [`phantom`]: synthetic vessel volumes, whitening, tiling and stitching.
//! - [`bench`]: correspondence matching and ODS / OIS / AP.

pub mod bench;
pub mod error;
pub mod layers;
pub mod nets;
pub mod phantom;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

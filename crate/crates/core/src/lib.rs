//! Filter grafting for convolutional networks.
//!
//! Several networks train side by side with diversified hyperparameters. At
//! every epoch boundary each network's layers are blended with a peer's, using
//! a coefficient driven by the weight entropy of the two layers. Filters whose
//! weights carry little information get re-activated without changing the
//! architecture.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the command-line
//! driver and the threaded coordinator live in the `graft` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod coordinator;
pub mod criteria;
pub mod data;
pub mod diagnostics;
mod error;
pub mod grafting;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ArchSpec, LayerKind, LayerWeights, ModelSnapshot};
pub use rng::Rng;
pub use tensor::Tensor;

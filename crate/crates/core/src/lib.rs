//! Core machinery for multi-frame monocular depth estimation at desk scale.
//!
//! The crate covers the full loss and geometry pipeline: pinhole projection
//! and inverse warping, SSIM/L1 photometric errors, plane-sweep cost volumes
//! with an EMA-tracked depth range, adaptive patchmatch support domains,
//! cross-/self-teaching consistency losses, total-objective assembly with
//! analytic depth gradients, a coarse-to-fine refiner, evaluation metrics and
//! a procedural scene renderer used as ground-truth oracle.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `endodepth` crate.

#![no_std]

#[macro_use]
extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod costvolume;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod patchmatch;
pub mod photometric;
pub mod refine;
pub mod rng;
pub mod synth;
pub mod teaching;

mod mathx;

pub use error::{Error, Result};

//! Desk-scale toolkit for studying targeted adversarial perturbations.
//!
//! The crate is organized around a fixed pipeline vocabulary:
//!
//! - [`tensor`] — dense f32 tensors with exact reverse-mode gradients for a
//!   fixed layer set (convolution, relu, maxpool, dense, flatten).
//! - [`net`] — the layer stack: forward, backward, cross-entropy, and a
//!   finite-difference gradient checker.
//! - [`data`] — labeled datasets plus a seeded synthetic image family that
//!   stands in for CIFAR-sized data on a CPU desk.
//! - [`model`] — classifier construction, standard and adversarial training,
//!   prediction, and penultimate features.
//! - [`attack`] — lp-ball projections and targeted PGD, per-image and
//!   universal (base-set) variants.
//! - [`eval`] — attack success rate, cross-model transfer, scale sweeps.
//! - [`geometry`] — patch locality and wrap-around translation analyses.
//! - [`forge`] — construction of perturbed, relabeled datasets and the
//!   probes that measure how well they generalize.
//! - [`io`] — bit-exact tensor/checkpoint files, CIFAR-10 binary ingestion,
//!   PPM rendering, CSV reports.
//! - [`runner`] — config-driven experiment orchestration used by the CLI.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod forge;
pub mod geometry;
pub mod io;
pub mod model;
pub mod net;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Mix/unmix tile augmentation and teacher-student training for keypoint
//! heatmap regression.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensorgrid`]: the dense `(n, c, h, w)` container and exact tile partitioning.
//! - [`mixmask`]: per-tile group permutations, their inverses and mask stacks.
//! - [`nnkit`]: convolution, batch norm, activations, loss, Adam, gradient checking
//!   and the `MMK1` checkpoint format.
//! - [`posenet`]: a 4-stage encoder/decoder heatmap network with mix hook points.
//! - [`teacher`]: Single / EMA / EMAN teacher updates and pseudo-label inference.
//! - [`synthpose`]: the synthetic articulated-figure dataset and its `SPD1` file format.
//! - [`ssltrain`]: the semi-supervised loop, metrics, experiments and ablations.
//! - [`gradsuite`]: finite-difference checks over every layer and the mixed network.
//! - [`cli`]: key=value run configuration and the subcommands behind the `mumkit` binary.

pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod mixmask;
pub mod nnkit;
pub mod posenet;
pub mod ssltrain;
pub mod synthpose;
pub mod teacher;
pub mod tensorgrid;

pub use error::{Error, Result};

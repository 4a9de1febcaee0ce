//! Text-guided editing of voxel assets with two-stage rectified-flow networks.
//!
//! The crate is organized bottom-up: [`numcore`] provides tensors and
//! reverse-mode differentiation, [`voxel`] the dense and sparse lattices,
//! [`registration`] the rigid alignment used to derive preservation masks,
//! [`blocks`] the conditioning layers, [`flow`] the rectified-flow objectives
//! and sampler, [`models`] the two networks and their training, [`synth`] a
//! procedural paired-edit corpus, [`metrics`] evaluation formulas, and
//! [`cli`] the command-line surface.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod cli;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod registration;
pub mod synth;
pub mod voxel;

pub use error::{Error, Result};

//! Equivariant diffusion models for geometric trajectories.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod egtn;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gtrj;
pub mod nn;
pub mod real;
pub mod sim;
pub mod symmetry;
pub mod tape;
pub mod train;

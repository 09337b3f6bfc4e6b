//! Exact relations for inhomogeneous media.
//!
//! A numerical library for the algebra of exact-relation subspaces and their
//! field-level consequences: closure checking of tensor subspaces, the
//! fractional-linear transform linking manifolds of coefficient tensors to
//! those subspaces, FFT multiplier solvers for the canonical field equations
//! on periodic grids, point-source kernel experiments, and boundary field
//! equalities for embedded bodies.
//!
//! Start with the `examples/` directory: each runnable example demonstrates
//! one capability end to end. The `xrel` binary drives the same experiments
//! from TOML configs.

pub mod boundary;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod greens;
pub mod grid;
pub mod physics;
pub mod report;
pub mod rng;
pub mod solver;
pub mod tensor_space;
pub mod transforms;

pub use error::{Result, XrelError};

//! Boundary-integral operator learning on variable geometries.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] builds closed curves, point clouds, neighbor graphs, least-squares
//!   tangential gradients and Gaussian random field inputs.
//! * [`kernels`] evaluates the 2D/3D layer-potential kernels and their short-range
//!   asymptotic integrals.
//! * [`panel2d`] is the closed-form panel method used to produce reference data,
//!   including the exterior Neumann solver.
//! * [`ewald`] splits a singular kernel into a mollified Fourier part and a local
//!   residual and applies the result in linear time.
//! * [`operator`] is the multiscale point cloud neural operator with hand-written
//!   reverse-mode gradients.
//! * [`train`] holds losses, least-squares fitting, Adam/OneCycle training and the
//!   scaling-law drivers.
//! * [`panel3d`] solves source-panel potential flow on triangle meshes.
//! * [`dataset`] and [`io`] generate and persist sample sets and checkpoints.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise.

// Index loops mirror the formulas; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod ewald;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod operator;
pub mod panel2d;
pub mod panel3d;
pub mod par;
pub mod quadrature;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

//! Probabilistic superquadric mixtures for semantic occupancy grids.
//!
//! A scene is a fixed-size set of primitives, each defining an occupancy
//! probability `exp(-f(x_local))` through the superquadric implicit function
//! (or, for the baseline, an ellipsoidal Gaussian). Occupancy combines across
//! primitives as `1 - prod(1 - p_i)`; semantics are the occupancy- and
//! opacity-weighted average of per-primitive class distributions.
//!
//! The crate covers evaluation ([`field`]), dense readout ([`rasterizer`]),
//! training objectives ([`losses`]), evaluation metrics ([`metrics`]),
//! per-scene gradient fitting with pruning and splitting ([`optimizer`]),
//! synthetic scenes ([`scenegen`]) and file formats ([`io`]).

// `!(x > 0.0)` checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub(crate) mod parallel;
pub mod primitives;
pub mod rasterizer;
pub mod scenegen;

pub use error::{Error, Result};
pub use parallel::{single_threaded, SINGLE_THREAD_ENV};

//! Stochastic gradient computation of p-means on constant-curvature model
//! spaces, with tools to study the fluctuations of the algorithm.

// NaN must fail the range checks, so they are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fluctuation;
pub mod geometry;
pub mod harness;
pub mod measure;
pub mod rng;
pub mod solver;

pub use geometry::{ModelSpace, Point, SpaceKind, TangentVector};
pub use measure::{AlgoConstants, BallContext, DiscreteMeasure};
pub use rng::{derive_stream, RngStream};

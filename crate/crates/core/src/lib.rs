//! Semantic SLAM back-end.
//!
//! Camera keyframes and three landmark classes (3D points, infinite planes and
//! dual-quadric objects) are estimated jointly by Levenberg–Marquardt over a
//! sparse factor graph. The crate also ships the data-association policies, a
//! synthetic scene simulator standing in for the learned front-ends, trajectory
//! evaluation, and the end-to-end pipeline driven by the `semslam` binary.

pub mod assoc;
pub mod error;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};

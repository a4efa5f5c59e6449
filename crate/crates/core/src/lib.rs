//! Face detection with a hidden rigid 3D pose.
//!
//! Faces are modelled as a rigid set of nine 3D keypoints seen through a
//! projected rigid transform `T(x) = u + s * pi(A x)`. The crate provides the
//! fitting and learning routines for that model, a yaw-sensitive linear and
//! binned scorer, binned additive pose regression, candidate generation with
//! keypoint support, greedy non-maximal suppression, and a seeded synthetic
//! scene generator with brute-force oracles.

pub mod candidates;
pub mod error;
pub mod geometry;
pub mod keypoints;
pub mod pose_regression;
pub mod psm;
pub mod rigid_fit;
pub mod shape;
pub mod synth;

pub use error::{Error, Result};

/// Version stamped into every serialized artifact.
pub const SCHEMA_VERSION: u32 = 1;

//! Geometry-aware toolkit for validating, planning, and reconstructing
//! 3D Gaussian-splat scenes from posed video frame sequences.
//!
//! The crate detects geometrically inconsistent camera trajectories,
//! parses scene-extension directives into camera paths, and optimizes
//! Gaussian scenes under photometric + depth + normal supervision with
//! closed-form depth alignment.

pub mod colmap;
pub mod grid;
pub mod losses;
pub mod manifest;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod plan;
pub mod priors;
pub mod splat;
pub mod trajectory;

//! Camera relocalization from single RGB images.
//!
//! The pipeline regresses dense 3D scene coordinates from an image with a
//! small fully convolutional network, samples camera-pose hypotheses from
//! minimal sets of 2D-3D correspondences, scores them with a soft inlier
//! count, and refines candidates with a damped Gauss-Newton loop. Every
//! stage carries analytical derivatives, so the whole system can be trained
//! end-to-end from pose supervision alone.

pub mod config;
pub mod data;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod pnp;
pub mod refinement;
pub mod regressor;
pub mod scoring;
pub mod training;

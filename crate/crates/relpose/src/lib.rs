//! Differentiable metric relative pose from probabilistic 3D-3D
//! correspondences.
//!
//! The crate estimates a metric relative pose `(R, t)` between two images
//! from grid-based keypoint maps (sub-pixel offsets, depths, confidences,
//! descriptors). Matching is probabilistic: a dual-softmax over descriptor
//! similarities combined with per-image keypoint distributions yields a
//! correspondence probability matrix, from which correspondence sets are
//! sampled. Poses come from a weighted Kabsch solver inside a RANSAC loop
//! with a soft inlier score, and the training objective is the expected
//! virtual correspondence reprojection error (VCRE) over sampled hypotheses.
//! Everything on the path from keypoint maps to the objective carries
//! hand-derived vector-Jacobian products, so a small learnable backbone can
//! be trained end to end with a score-function estimator for the sampling
//! step and pathwise gradients for the rest.
//!
//! The `relpose` binary exposes scene generation, solving, training,
//! evaluation, and a finite-difference gradient check over these pieces.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod gradcheck;
pub mod kabsch;
pub mod maps;
pub mod matching;
pub mod objective;
pub mod ransac;
pub mod streams;
pub mod toy;

pub use error::{Error, Result};
pub use geometry::{CameraPoint3D, GridCell, Intrinsics, PixelPoint, Pose};
pub use maps::KeypointMaps;
pub mod cli;

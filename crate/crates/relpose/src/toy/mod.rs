//! A miniature end-to-end pipeline: synthetic scenes, a parameter-table
//! backbone that plays the role of a feature extractor, and a trainer that
//! drives the backbone through the matcher, the pose solver and the
//! reprojection objective.

pub mod backbone;
pub mod scene;
pub mod train;

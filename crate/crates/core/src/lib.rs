//! Dense detection and description of 3D local features on point clouds.
//!
//! The crate covers forward inference and evaluation:
//!
//! * [`kpconv`]: density-normalized kernel point convolution and the fully
//!   convolutional network producing one descriptor per point;
//! * [`detector`]: density-invariant keypoint scores and top-k selection;
//! * [`registration`]: mutual nearest neighbor matching, Kabsch, RANSAC, ICP;
//! * [`metrics`]: inlier ratio, feature matching recall, registration recall,
//!   RTE/RRE, success rate and relative repeatability;
//! * [`io`] and [`pipeline`]: file formats and the end-to-end benchmark run.

pub mod detector;
pub mod geometry;
pub mod io;
pub mod kpconv;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod registration;
pub mod synthetic;

pub use geometry::{
    apply_transform, compose, CorrespondenceSet, FeatureMap, Point, PointCloud, RigidTransform,
    ScoreMap,
};

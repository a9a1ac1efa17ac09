//! File formats: PLY clouds, pose files, pair manifests, dataset configs,
//! feature binaries and CSV outputs.

mod config;
mod features;
mod manifest;
mod ply;
mod pose;
mod tables;

pub use config::{DatasetConfig, Profile};
pub use features::{features_from_bytes, features_to_bytes, read_features, write_features, FEATURE_MAGIC};
pub use manifest::{read_manifest, parse_manifest, write_manifest, ManifestPair, PairManifest, OVERLAP_THRESHOLD};
pub use ply::{parse_ply, read_ply, write_ply, ply_to_bytes, PlyEncoding, PlyPrecision};
pub use pose::{parse_poses, read_pose_file, write_pose_file, poses_to_string, rigid_from_matrix4, PoseEntry, POSE_TOL};
pub use tables::{
    correspondences_csv, keypoints_csv, report_csv, report_table,
};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("truncated body: {0}")]
    Truncated(String),
    #[error("missing coordinate property '{0}'")]
    MissingCoordinate(&'static str),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: matrix is not rigid (deviation {deviation:e})")]
    NotRigid { line: usize, deviation: f64 },
    #[error("bad feature file: {0}")]
    BadFeatures(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        msg: msg.into(),
    }
}

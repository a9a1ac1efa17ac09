//! Domain types shared across the crate and exact rigid-geometry operations.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use ndarray::Array2;
use thiserror::Error;

pub type Point = Vector3<f64>;

/// Per-entry tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),
    #[error("attribute `{name}` has {len} values for {points} points")]
    AttributeLength {
        name: String,
        len: usize,
        points: usize,
    },
    #[error("rotation is not orthonormal (max |RᵀR - I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("rotation determinant {0} is not +1")]
    Reflection(f64),
    #[error("non-finite transform entry")]
    NonFiniteTransform,
}

/// Named per-point scalar channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<f64>,
}

/// Ordered set of 3D points in meters, with optional per-point scalar channels.
///
/// Every coordinate is finite and there is at least one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    attributes: Vec<Attribute>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        Self::with_attributes(points, Vec::new())
    }

    pub fn with_attributes(
        points: Vec<Point>,
        attributes: Vec<Attribute>,
    ) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        for a in &attributes {
            if a.values.len() != points.len() {
                return Err(GeometryError::AttributeLength {
                    name: a.name.clone(),
                    len: a.values.len(),
                    points: points.len(),
                });
            }
        }
        Ok(Self { points, attributes })
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Result<Self, GeometryError> {
        Self::new(xyz.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud with the given indices, attributes carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let attributes = self
            .attributes
            .iter()
            .map(|a| Attribute {
                name: a.name.clone(),
                values: indices.iter().map(|&i| a.values[i]).collect(),
            })
            .collect();
        Self::with_attributes(points, attributes)
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Result<Self, GeometryError> {
        Self::with_attributes(
            self.points.iter().map(|p| p + offset).collect(),
            self.attributes.clone(),
        )
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// SE(3) pose: `x ↦ rotation·x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = +1` within [`ORTHONORMAL_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteTransform);
        }
        let err = orthonormality_error(&rotation);
        if err > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal(err));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::Reflection(det));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Rotation `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_euler_xyz(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `(Rᵀ, −Rᵀt)`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle of this transform in radians, in `[0, π]`.
    ///
    /// Same value as `arccos((trace − 1) / 2)`, but taken through `atan2` with
    /// the skew part so small angles keep full precision.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm()
            / 2.0;
        let c = (r.trace() - 1.0) / 2.0;
        s.atan2(c)
    }
}

/// Largest entry of `|RᵀR − I|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Transformed copy of `cloud`; attributes are copied unchanged.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        attributes: cloud.attributes.clone(),
    }
}

/// Applies `t2` first, then `t1`.
pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: t1.rotation * t2.rotation,
        translation: t1.rotation * t2.translation + t1.translation,
    }
}

/// Dense per-point output of the network.
///
/// `responses` is the non-negative response matrix used for keypoint scoring;
/// `descriptors` holds the unit-length rows used for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub responses: Array2<f64>,
    pub descriptors: Array2<f64>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.descriptors.ncols()
    }

    /// Builds descriptors as the L2-normalized rows of `raw`, and responses as
    /// its rectified copy. All-zero rows stay zero.
    pub fn from_head_output(raw: &Array2<f64>) -> Self {
        let responses = raw.mapv(|v| v.max(0.0));
        let mut descriptors = raw.clone();
        for mut row in descriptors.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        Self {
            responses,
            descriptors,
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            responses: self.responses.select(ndarray::Axis(0), indices),
            descriptors: self.descriptors.select(ndarray::Axis(0), indices),
        }
    }
}

/// Per-point detection scores with the per-channel terms kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Vec<f64>,
    pub saliency: Array2<f64>,
    pub channel_max: Array2<f64>,
}

/// Index pairs `(i in P, j in Q)` with their descriptor distances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            pairs: keep.iter().map(|&k| self.pairs[k]).collect(),
            distances: keep.iter().map(|&k| self.distances[k]).collect(),
        }
    }
}

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::Vector3;

use super::KpConvError;
use crate::geometry::Point;

/// K=15 disposition in a unit-extent ball, origin first. Generated offline by
/// `tools/gen_kernel_points.py` (repulsion minimisation); little-endian f32
/// triples.
static KERNEL_POINTS_K15: &[u8] = include_bytes!("../../data/kernel_points_k15.bin");

/// Kernel point counts with a shipped disposition table.
pub const SUPPORTED_KERNEL_SIZES: [usize; 2] = [1, 15];

pub const DEFAULT_KERNEL_SIZE: usize = 15;

/// Default ratio `extent / sigma`.
pub const DEFAULT_SIGMA_DIVISOR: f64 = 2.5;

/// Kernel points in a ball of radius `extent` together with the influence
/// length of the linear correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLayout {
    points: Vec<Point>,
    extent: f64,
    sigma: f64,
}

impl KernelLayout {
    /// Custom layout. Every point must lie within `extent` of the origin.
    pub fn new(points: Vec<Point>, extent: f64, sigma: f64) -> Result<Self, KpConvError> {
        if !(extent.is_finite() && extent > 0.0) || !(sigma.is_finite() && sigma > 0.0) {
            return Err(KpConvError::InvalidKernel(format!(
                "extent {extent} and sigma {sigma} must be positive"
            )));
        }
        if points.is_empty() {
            return Err(KpConvError::InvalidKernel("no kernel points".into()));
        }
        if let Some(p) = points.iter().find(|p| p.norm() > extent * (1.0 + 1e-9)) {
            return Err(KpConvError::InvalidKernel(format!(
                "kernel point {p:?} outside extent {extent}"
            )));
        }
        Ok(Self {
            points,
            extent,
            sigma,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

fn unit_table(k: usize) -> Result<Vec<Point>, KpConvError> {
    match k {
        1 => Ok(vec![Point::zeros()]),
        15 => Ok(KERNEL_POINTS_K15
            .chunks_exact(12)
            .map(|c| {
                Vector3::new(
                    LittleEndian::read_f32(&c[0..4]) as f64,
                    LittleEndian::read_f32(&c[4..8]) as f64,
                    LittleEndian::read_f32(&c[8..12]) as f64,
                )
            })
            .collect()),
        _ => Err(KpConvError::UnsupportedKernelSize(k)),
    }
}

/// Shipped disposition of `k` kernel points scaled to `extent`, with
/// `sigma = extent / 2.5`.
pub fn kernel_dispositions(k: usize, extent: f64) -> Result<KernelLayout, KpConvError> {
    kernel_dispositions_with(k, extent, DEFAULT_SIGMA_DIVISOR)
}

pub fn kernel_dispositions_with(
    k: usize,
    extent: f64,
    sigma_divisor: f64,
) -> Result<KernelLayout, KpConvError> {
    let unit = unit_table(k)?;
    if unit.len() != k {
        return Err(KpConvError::InvalidKernel(format!(
            "table holds {} points, expected {k}",
            unit.len()
        )));
    }
    KernelLayout::new(
        unit.into_iter().map(|p| p * extent).collect(),
        extent,
        extent / sigma_divisor,
    )
}

/// Linear correlation `max(0, 1 − ‖offset − kernel_point‖ / sigma)`.
#[inline]
pub fn correlation(offset: &Point, kernel_point: &Point, sigma: f64) -> f64 {
    (1.0 - (offset - kernel_point).norm() / sigma).max(0.0)
}

//! Radius neighborhoods over a static kd-tree, plus the subsampling steps
//! used by the network and the evaluation pipeline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{apply_transform, Attribute, Point, PointCloud, RigidTransform};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum NeighborhoodError {
    #[error("cannot index an empty point set")]
    EmptyCloud,
    #[error("radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxel(f64),
    #[error("sample rate must be at least 1")]
    ZeroRate,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a point set.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    points: Vec<Point>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Per-query neighbor indices, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborLists {
    lists: Vec<Vec<usize>>,
}

impl NeighborLists {
    /// Wraps precomputed lists, sorting each one.
    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        for l in &mut lists {
            l.sort_unstable();
        }
        Self { lists }
    }

    pub fn get(&self, query: usize) -> &[usize] {
        &self.lists[query]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.lists.iter().map(Vec::as_slice)
    }

    pub fn into_inner(self) -> Vec<Vec<usize>> {
        self.lists
    }
}

/// Slack on split-plane pruning so that floating point rounding never hides a
/// point whose squared distance passes the closed-ball test.
fn prune_slack(q: f64, r: f64) -> f64 {
    1e-9 * (1.0 + q.abs() + r)
}

impl NeighborhoodIndex {
    pub fn new(points: Vec<Point>) -> Result<Self, NeighborhoodError> {
        if points.is_empty() {
            return Err(NeighborhoodError::EmptyCloud);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build(&points, &mut order, 0, points.len(), &mut nodes);
        Ok(Self {
            points,
            order,
            nodes,
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

    /// Indices `i` with `‖xᵢ − q‖² ≤ r²`, ascending.
    pub fn within(&self, q: &Point, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = r * r;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        if (self.points[i] - q).norm_squared() <= r2 {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let d = q[axis] - value;
                    let slack = prune_slack(q[axis], r);
                    if d <= r + slack {
                        stack.push(left);
                    }
                    if -d <= r + slack {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest indexed point to `q` as `(index, squared distance)`; ties go to
    /// the lower index.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        best
    }

    fn nearest_rec(&self, n: usize, q: &Point, best: &mut (usize, f64)) {
        match self.nodes[n] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                let reach = d.abs() - prune_slack(q[axis], 0.0);
                if reach <= 0.0 || reach * reach <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }
}

fn build(points: &[Point], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = points[slice[0]];
    let mut hi = lo;
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] == lo[axis] {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

pub fn build_index(cloud: &PointCloud) -> NeighborhoodIndex {
    NeighborhoodIndex::new(cloud.points().to_vec()).expect("point clouds are never empty")
}

/// Closed-ball neighborhoods of every query point.
pub fn radius_neighbors(
    index: &NeighborhoodIndex,
    queries: &[Point],
    r: f64,
) -> Result<NeighborLists, NeighborhoodError> {
    if !(r.is_finite() && r > 0.0) {
        return Err(NeighborhoodError::InvalidRadius(r));
    }
    let lists = queries.par_iter().map(|q| index.within(q, r)).collect();
    Ok(NeighborLists { lists })
}

/// Lexicographic total order on coordinates.
pub(crate) fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

fn cell_of(p: &Point, anchor: &Point, size: f64) -> [i64; 3] {
    let c = |k: usize| ((p[k] - anchor[k]) / size).floor() as i64;
    [c(0), c(1), c(2)]
}

/// Groups point indices by grid cell. Cells come out in ascending key order and
/// the members of each cell in lexicographic coordinate order, so the result
/// depends only on the multiset of points, not on their input order.
fn grid_cells(points: &[Point], size: f64, anchor: &Point) -> Vec<Vec<usize>> {
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_of(p, anchor, size)).or_default().push(i);
    }
    cells
        .into_values()
        .map(|mut members| {
            members.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]));
            members
        })
        .collect()
}

fn mean_of(points: &[Point], members: &[usize]) -> Point {
    let sum = members.iter().fold(Point::zeros(), |acc, &i| acc + points[i]);
    sum / members.len() as f64
}

/// Barycenters of the occupied cells of a grid anchored at `anchor`.
pub(crate) fn grid_subsample(points: &[Point], size: f64, anchor: &Point) -> Vec<Point> {
    grid_cells(points, size, anchor)
        .iter()
        .map(|m| mean_of(points, m))
        .collect()
}

/// One point per occupied voxel at the barycenter of its members. The grid is
/// anchored at the origin with cell index `floor(x / voxel)`; output is ordered
/// by cell index. Attributes are averaged per cell.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, NeighborhoodError> {
    if !(voxel.is_finite() && voxel > 0.0) {
        return Err(NeighborhoodError::InvalidVoxel(voxel));
    }
    let pts = cloud.points();
    let cells = grid_cells(pts, voxel, &Point::zeros());
    let points = cells.iter().map(|m| mean_of(pts, m)).collect();
    let attributes = cloud
        .attributes()
        .iter()
        .map(|a| Attribute {
            name: a.name.clone(),
            values: cells
                .iter()
                .map(|m| m.iter().map(|&i| a.values[i]).sum::<f64>() / m.len() as f64)
                .collect(),
        })
        .collect();
    Ok(PointCloud::with_attributes(points, attributes).expect("barycenters of finite points"))
}

/// Keeps points `0, rate, 2·rate, …` in their original order.
pub fn uniform_downsample(cloud: &PointCloud, rate: usize) -> Result<PointCloud, NeighborhoodError> {
    if rate == 0 {
        return Err(NeighborhoodError::ZeroRate);
    }
    let keep: Vec<usize> = (0..cloud.len()).step_by(rate).collect();
    Ok(cloud.select(&keep).expect("index 0 is always kept"))
}

/// Rotates the cloud about the origin by angles drawn uniformly from
/// `[0, 2π)` about each of the x, y and z axes.
pub fn random_rotation_perturb(cloud: &PointCloud, seed: u64) -> (PointCloud, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angle = || rng.random_range(0.0..TAU);
    let (rx, ry, rz) = (angle(), angle(), angle());
    let t = RigidTransform::from_euler_xyz(rx, ry, rz, Point::zeros());
    (apply_transform(cloud, &t), t)
}

//! Descriptor matching and rigid alignment.
//!
//! Every transform estimated here maps the second cloud `Q` into the frame of
//! the first cloud `P`, so a pair `(i, j)` is consistent with `T` when
//! `‖p_i − T q_j‖` is small.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};
use ndarray::ArrayView1;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CorrespondenceSet, FeatureMap, GeometryError, Point, PointCloud, RigidTransform};
use crate::neighborhood::NeighborhoodIndex;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("empty keypoint selection")]
    EmptySelection,
    #[error("selection index {index} out of range for {len} points")]
    SelectionIndex { index: usize, len: usize },
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DescriptorDim(usize, usize),
    #[error("{found} correspondences, at least {needed} required")]
    TooFewPairs { found: usize, needed: usize },
    #[error("source and target hold {0} and {1} points")]
    LengthMismatch(usize, usize),
    #[error("degenerate configuration (collinear or coincident points)")]
    Degenerate,
    #[error("correspondence ({0}, {1}) out of range")]
    PairIndex(usize, usize),
    #[error("no hypothesis reached {needed} inliers (best {best})")]
    NoConsensus { best: usize, needed: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("ICP found no associations")]
    EmptyAssociation,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `to` (restricted to `to_sel`) for each row of `from`
/// (restricted to `from_sel`). Returns positions into `to_sel` and squared
/// distances; ties go to the lower point index.
fn nn_positions(
    from: &FeatureMap,
    from_sel: &[usize],
    to: &FeatureMap,
    to_sel: &[usize],
) -> Vec<(usize, f64)> {
    from_sel
        .par_iter()
        .map(|&i| {
            let a = from.descriptors.row(i);
            let mut best = (0, f64::INFINITY);
            for (pos, &j) in to_sel.iter().enumerate() {
                let d = sq_dist(a, to.descriptors.row(j));
                if d < best.1 || (d == best.1 && j < to_sel[best.0]) {
                    best = (pos, d);
                }
            }
            best
        })
        .collect()
}

fn check_selection(sel: &[usize], len: usize) -> Result<(), RegistrationError> {
    if sel.is_empty() {
        return Err(RegistrationError::EmptySelection);
    }
    match sel.iter().find(|&&i| i >= len) {
        Some(&index) => Err(RegistrationError::SelectionIndex { index, len }),
        None => Ok(()),
    }
}

/// Mutual nearest neighbors in descriptor space between the selected rows of
/// `feat_p` and `feat_q`. Pairs hold point indices (not selection positions)
/// and are listed in `sel_p` order.
pub fn mutual_nn_matches(
    feat_p: &FeatureMap,
    feat_q: &FeatureMap,
    sel_p: &[usize],
    sel_q: &[usize],
) -> Result<CorrespondenceSet, RegistrationError> {
    check_selection(sel_p, feat_p.len())?;
    check_selection(sel_q, feat_q.len())?;
    if feat_p.channels() != feat_q.channels() {
        return Err(RegistrationError::DescriptorDim(
            feat_p.channels(),
            feat_q.channels(),
        ));
    }
    let p_to_q = nn_positions(feat_p, sel_p, feat_q, sel_q);
    let q_to_p = nn_positions(feat_q, sel_q, feat_p, sel_p);
    let mut out = CorrespondenceSet::default();
    let mut seen = HashSet::new();
    for (a, &(b, d2)) in p_to_q.iter().enumerate() {
        let (i, j) = (sel_p[a], sel_q[b]);
        // Compare point indices so duplicated selection entries still count
        // as mutual.
        if sel_p[q_to_p[b].0] == i && seen.insert((i, j)) {
            out.pairs.push((i, j));
            out.distances.push(d2.sqrt());
        }
    }
    Ok(out)
}

/// Least-squares rigid transform with `dst ≈ R·src + t` (Kabsch), with the
/// reflection case folded back onto a proper rotation.
pub fn estimate_rigid(src: &[Point], dst: &[Point]) -> Result<RigidTransform, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(RegistrationError::TooFewPairs {
            found: src.len(),
            needed: 3,
        });
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s - cs;
        h += a * (d - cd).transpose();
        spread += a * a.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let mid = sv.sum() - lo - hi;
    if hi.is_nan() || hi <= 0.0 || mid <= 1e-12 * hi {
        return Err(RegistrationError::Degenerate);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RegistrationError::Degenerate),
    };
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs)?)
}

/// Root mean squared residual `‖dst − T src‖` over all pairs.
pub fn alignment_rmse(src: &[Point], dst: &[Point], t: &RigidTransform) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sse: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - t.apply(s)).norm_squared())
        .sum();
    (sse / src.len() as f64).sqrt()
}

/// Iterations needed to draw at least one all-inlier sample of `sample_size`
/// with probability `confidence` when a fraction `inlier_ratio` of the
/// correspondences are inliers.
pub fn ransac_iterations_for(confidence: f64, inlier_ratio: f64, sample_size: usize) -> usize {
    let w = inlier_ratio.powi(sample_size as i32);
    if w >= 1.0 {
        return 1;
    }
    if w <= 0.0 {
        return usize::MAX;
    }
    ((1.0 - confidence).ln() / (1.0 - w).ln()).ceil() as usize
}

/// Probability that `iterations` samples include an all-inlier one.
pub fn ransac_confidence(iterations: usize, inlier_ratio: f64, sample_size: usize) -> f64 {
    1.0 - (1.0 - inlier_ratio.powi(sample_size as i32)).powf(iterations as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    pub max_iters: usize,
    pub sample_size: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Stop once the best inlier ratio so far makes `confidence` reachable.
    pub adaptive: bool,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            sample_size: 3,
            inlier_threshold: 0.1,
            seed: 0,
            adaptive: false,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps `Q` into the frame of `P`.
    pub transform: RigidTransform,
    pub inliers: CorrespondenceSet,
    pub iterations_used: usize,
    pub inlier_threshold: f64,
}

/// Hypotheses are drawn and scored in blocks so the adaptive stop point does
/// not depend on thread scheduling.
const RANSAC_BLOCK: usize = 1000;

#[derive(Debug, Clone, Copy)]
struct Score {
    count: usize,
    rmse: f64,
    index: usize,
}

impl Score {
    /// More inliers, then lower inlier RMSE, then earlier hypothesis.
    fn better_than(&self, other: &Score) -> bool {
        other
            .count
            .cmp(&self.count)
            .then(self.rmse.total_cmp(&other.rmse))
            .then(self.index.cmp(&other.index))
            .is_lt()
    }
}

fn score(t: &RigidTransform, src: &[Point], dst: &[Point], thr2: f64, index: usize) -> Score {
    score_bounded(t, src, dst, thr2, index, 0).expect("no bound")
}

/// Like [`score`], but gives up (returning `None`) as soon as the hypothesis
/// can no longer reach `min_count` inliers.
fn score_bounded(
    t: &RigidTransform,
    src: &[Point],
    dst: &[Point],
    thr2: f64,
    index: usize,
    min_count: usize,
) -> Option<Score> {
    let m = src.len();
    let mut count = 0;
    let mut sse = 0.0;
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let r = (d - t.apply(s)).norm_squared();
        if r <= thr2 {
            count += 1;
            sse += r;
        } else if count + (m - k - 1) < min_count {
            return None;
        }
    }
    let rmse = if count > 0 { (sse / count as f64).sqrt() } else { f64::INFINITY };
    Some(Score { count, rmse, index })
}

fn inlier_positions(t: &RigidTransform, src: &[Point], dst: &[Point], thr2: f64) -> Vec<usize> {
    (0..src.len())
        .filter(|&k| (dst[k] - t.apply(&src[k])).norm_squared() <= thr2)
        .collect()
}

fn refit(
    pos: &[usize],
    src: &[Point],
    dst: &[Point],
) -> Result<RigidTransform, RegistrationError> {
    let s: Vec<Point> = pos.iter().map(|&k| src[k]).collect();
    let d: Vec<Point> = pos.iter().map(|&k| dst[k]).collect();
    estimate_rigid(&s, &d)
}

/// RANSAC over `matches` followed by least-squares refits on the consensus
/// set. Deterministic for a given seed regardless of the thread count.
pub fn ransac_register(
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    matches: &CorrespondenceSet,
    params: &RansacParams,
) -> Result<RegistrationResult, RegistrationError> {
    if params.sample_size < 3 {
        return Err(RegistrationError::InvalidParams(format!(
            "sample size {} below 3",
            params.sample_size
        )));
    }
    if params.max_iters == 0 || params.inlier_threshold.is_nan() || params.inlier_threshold <= 0.0 {
        return Err(RegistrationError::InvalidParams(
            "max_iters and inlier_threshold must be positive".into(),
        ));
    }
    let m = matches.len();
    if m < params.sample_size {
        return Err(RegistrationError::TooFewPairs {
            found: m,
            needed: params.sample_size,
        });
    }
    let (pp, qp) = (cloud_p.points(), cloud_q.points());
    let mut src = Vec::with_capacity(m);
    let mut dst = Vec::with_capacity(m);
    for &(i, j) in &matches.pairs {
        if i >= pp.len() || j >= qp.len() {
            return Err(RegistrationError::PairIndex(i, j));
        }
        dst.push(pp[i]);
        src.push(qp[j]);
    }
    let thr2 = params.inlier_threshold * params.inlier_threshold;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Score, RigidTransform)> = None;
    let mut done = 0;
    while done < params.max_iters {
        let block = RANSAC_BLOCK.min(params.max_iters - done);
        let samples: Vec<Vec<usize>> = (0..block)
            .map(|_| sample(&mut rng, m, params.sample_size).into_vec())
            .collect();
        // Hypotheses that cannot tie the best count so far are dropped early.
        let floor = best.as_ref().map_or(0, |b| b.0.count);
        let block_best = samples
            .par_iter()
            .enumerate()
            .filter_map(|(k, idx)| {
                let t = refit(idx, &src, &dst).ok()?;
                Some((score_bounded(&t, &src, &dst, thr2, done + k, floor)?, t))
            })
            .reduce_with(|a, b| if b.0.better_than(&a.0) { b } else { a });
        done += block;
        if let Some(cand) = block_best {
            if best.as_ref().is_none_or(|b| cand.0.better_than(&b.0)) {
                best = Some(cand);
            }
        }
        if params.adaptive {
            if let Some((s, _)) = &best {
                let needed =
                    ransac_iterations_for(params.confidence, s.count as f64 / m as f64, params.sample_size);
                if done >= needed {
                    break;
                }
            }
        }
    }

    let (hyp, mut transform) = match best {
        Some(b) if b.0.count >= params.sample_size => b,
        other => {
            return Err(RegistrationError::NoConsensus {
                best: other.map_or(0, |b| b.0.count),
                needed: params.sample_size,
            })
        }
    };
    let mut current = score(&transform, &src, &dst, thr2, 0);
    let mut pos = inlier_positions(&transform, &src, &dst, thr2);
    debug_assert_eq!(current.count, hyp.count);
    for _ in 0..10 {
        let Ok(t) = refit(&pos, &src, &dst) else { break };
        let s = score(&t, &src, &dst, thr2, 0);
        if !s.better_than(&current) {
            break;
        }
        transform = t;
        current = s;
        pos = inlier_positions(&transform, &src, &dst, thr2);
    }
    log::debug!(
        "ransac: {} of {m} inliers after {done} hypotheses",
        pos.len()
    );
    Ok(RegistrationResult {
        transform,
        inliers: matches.subset(&pos),
        iterations_used: done,
        inlier_threshold: params.inlier_threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Stop once translation change plus rotation change (radians) is below this.
    pub convergence_eps: f64,
    /// Drop associations farther than this, if set.
    pub max_distance: Option<f64>,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            convergence_eps: 1e-8,
            max_distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Root mean squared association distance at the start of each iteration.
    pub objective: Vec<f64>,
}

fn transform_delta(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let rel = crate::geometry::compose(b, &a.inverse());
    (a.translation() - b.translation()).norm() + rel.rotation_angle()
}

/// Point-to-point ICP aligning `cloud_q` onto `cloud_p`, starting from `initial`.
pub fn icp_refine(
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    initial: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, RegistrationError> {
    if params.max_iters == 0 {
        return Err(RegistrationError::InvalidParams("max_iters must be positive".into()));
    }
    let index = NeighborhoodIndex::new(cloud_p.points().to_vec())
        .map_err(|_| RegistrationError::EmptyAssociation)?;
    let max_d2 = params.max_distance.map_or(f64::INFINITY, |d| d * d);
    let mut transform = *initial;
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let assoc: Vec<(usize, f64)> = cloud_q
            .points()
            .par_iter()
            .map(|q| index.nearest(&transform.apply(q)))
            .collect();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sse = 0.0;
        for (q, &(j, d2)) in cloud_q.points().iter().zip(&assoc) {
            if d2 <= max_d2 {
                src.push(*q);
                dst.push(index.points()[j]);
                sse += d2;
            }
        }
        if src.is_empty() {
            return Err(RegistrationError::EmptyAssociation);
        }
        objective.push((sse / src.len() as f64).sqrt());
        let next = estimate_rigid(&src, &dst)?;
        let delta = transform_delta(&transform, &next);
        transform = next;
        if delta < params.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform,
        iterations,
        converged,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_transform(rng: &mut impl Rng, scale: f64) -> RigidTransform {
        let axis = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let t = Vector3::new(rng.random(), rng.random(), rng.random()) * scale;
        RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI), t)
    }

    fn random_points(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(rng.random(), rng.random(), rng.random()) * scale)
            .collect()
    }

    fn unit_rows(rng: &mut impl Rng, n: usize, c: usize) -> FeatureMap {
        let mut raw = Array2::zeros((n, c));
        raw.mapv_inplace(|_: f64| StandardNormal.sample(rng));
        FeatureMap::from_head_output(&raw)
    }

    fn mutual_oracle(p: &FeatureMap, q: &FeatureMap) -> Vec<(usize, usize)> {
        let d = |i: usize, j: usize| sq_dist(p.descriptors.row(i), q.descriptors.row(j));
        let mut out = Vec::new();
        for i in 0..p.len() {
            let j = (0..q.len()).min_by(|&a, &b| d(i, a).total_cmp(&d(i, b))).unwrap();
            let back = (0..p.len()).min_by(|&a, &b| d(a, j).total_cmp(&d(b, j))).unwrap();
            if back == i {
                out.push((i, j));
            }
        }
        out
    }

    #[test]
    fn identical_orthonormal_descriptors_pair_up() {
        let mut raw = Array2::zeros((5, 8));
        for i in 0..5 {
            raw[[i, i]] = 1.0;
        }
        let f = FeatureMap::from_head_output(&raw);
        let all: Vec<usize> = (0..5).collect();
        let m = mutual_nn_matches(&f, &f, &all, &all).unwrap();
        assert_eq!(m.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(m.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn hand_two_by_two() {
        // Points on a line in a 1-d descriptor space reproduce the distance table.
        let p = FeatureMap {
            responses: Array2::zeros((2, 1)),
            descriptors: ndarray::array![[0.0], [1.0]],
        };
        let q = FeatureMap {
            responses: Array2::zeros((2, 1)),
            descriptors: ndarray::array![[0.1], [0.8]],
        };
        let m = mutual_nn_matches(&p, &q, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!((m.distances[0] - 0.1).abs() < 1e-15);
        assert!((m.distances[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mutual_nn_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = unit_rows(&mut rng, 300, 32);
        let q = unit_rows(&mut rng, 300, 32);
        let all: Vec<usize> = (0..300).collect();
        let m = mutual_nn_matches(&p, &q, &all, &all).unwrap();
        assert_eq!(m.pairs, mutual_oracle(&p, &q));
        let back = mutual_nn_matches(&q, &p, &all, &all).unwrap();
        let mut transposed: Vec<_> = back.pairs.iter().map(|&(a, b)| (b, a)).collect();
        transposed.sort_unstable();
        let mut fwd = m.pairs.clone();
        fwd.sort_unstable();
        assert_eq!(fwd, transposed);
    }

    #[test]
    fn selections_map_back_to_point_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = unit_rows(&mut rng, 50, 16);
        let sel_p = vec![40, 3, 17];
        let q = p.select_rows(&[3, 17, 40, 5]);
        let m = mutual_nn_matches(&p, &q, &sel_p, &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.pairs, vec![(40, 2), (3, 0), (17, 1)]);
        assert_eq!(
            mutual_nn_matches(&p, &q, &[], &[0]).unwrap_err(),
            RegistrationError::EmptySelection
        );
        assert!(mutual_nn_matches(&p, &q, &[0], &[9]).is_err());
    }

    #[test]
    fn kabsch_identity_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let src = random_points(&mut rng, 10, 2.0);
        let id = estimate_rigid(&src, &src).unwrap();
        assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation().norm() < 1e-12);
        for _ in 0..20 {
            let t = random_transform(&mut rng, 5.0);
            let dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
            let e = estimate_rigid(&src, &dst).unwrap();
            let err = crate::geometry::compose(&e, &t.inverse());
            assert!(err.rotation_angle() < 1e-9);
            assert!((e.translation() - t.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn kabsch_reflection_is_corrected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let src = random_points(&mut rng, 12, 1.0);
        let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x, p.y, -p.z)).collect();
        let e = estimate_rigid(&src, &dst).unwrap();
        assert!((e.rotation().determinant() - 1.0).abs() < 1e-9);
        assert!(alignment_rmse(&src, &dst, &e) > 1e-3);
    }

    #[test]
    fn kabsch_errors() {
        let a = vec![Point::zeros(), Point::x()];
        assert_eq!(
            estimate_rigid(&a, &a).unwrap_err(),
            RegistrationError::TooFewPairs { found: 2, needed: 3 }
        );
        let line: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(estimate_rigid(&line, &line).unwrap_err(), RegistrationError::Degenerate);
        let same = vec![Point::new(1.0, 1.0, 1.0); 4];
        assert_eq!(estimate_rigid(&same, &same).unwrap_err(), RegistrationError::Degenerate);
    }

    #[test]
    fn kabsch_residual_invariant_under_common_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let src = random_points(&mut rng, 30, 1.0);
        let dst: Vec<Point> = src
            .iter()
            .map(|p| p + Point::new(rng.random(), rng.random(), rng.random()) * 0.1)
            .collect();
        let r0 = alignment_rmse(&src, &dst, &estimate_rigid(&src, &dst).unwrap());
        let g = random_transform(&mut rng, 10.0);
        let src2: Vec<Point> = src.iter().map(|p| g.apply(p)).collect();
        let dst2: Vec<Point> = dst.iter().map(|p| g.apply(p)).collect();
        let r1 = alignment_rmse(&src2, &dst2, &estimate_rigid(&src2, &dst2).unwrap());
        assert!((r0 - r1).abs() < 1e-9);
    }

    #[test]
    fn confidence_arithmetic() {
        // The smallest k reaching 0.999 at a 5% inlier ratio with 3-samples.
        assert_eq!(ransac_iterations_for(0.999, 0.05, 3), 55259);
        let c = ransac_confidence(55258, 0.05, 3);
        assert!(c < 0.999 && c > 0.998_999_9);
        assert!(ransac_confidence(55259, 0.05, 3) >= 0.999);
        assert_eq!(ransac_iterations_for(0.999, 1.0, 3), 1);
    }

    /// `P` points, `Q` points and matches with the first `n_in` exact under `t`.
    fn synthetic_matches(
        rng: &mut ChaCha8Rng,
        t: &RigidTransform,
        n: usize,
        n_in: usize,
    ) -> (PointCloud, PointCloud, CorrespondenceSet) {
        let q = random_points(rng, n, 10.0);
        let p: Vec<Point> = q
            .iter()
            .enumerate()
            .map(|(k, x)| if k < n_in { t.apply(x) } else { random_points(rng, 1, 10.0)[0] })
            .collect();
        let matches = CorrespondenceSet {
            pairs: (0..n).map(|k| (k, k)).collect(),
            distances: vec![0.0; n],
        };
        (PointCloud::new(p).unwrap(), PointCloud::new(q).unwrap(), matches)
    }

    #[test]
    fn ransac_noiseless_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let t = random_transform(&mut rng, 3.0);
        let (p, q, m) = synthetic_matches(&mut rng, &t, 50, 50);
        let params = RansacParams { max_iters: 200, ..Default::default() };
        let r = ransac_register(&p, &q, &m, &params).unwrap();
        assert_eq!(r.inliers.len(), 50);
        assert!((r.transform.to_matrix4() - t.to_matrix4()).abs().max() < 1e-9);
        assert_eq!(r.iterations_used, 200);
    }

    #[test]
    fn ransac_with_outliers_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = random_transform(&mut rng, 3.0);
        let (p, q, m) = synthetic_matches(&mut rng, &t, 200, 140);
        let params = RansacParams { max_iters: 5000, seed: 99, ..Default::default() };
        let a = ransac_register(&p, &q, &m, &params).unwrap();
        let b = ransac_register(&p, &q, &m, &params).unwrap();
        assert_eq!(a, b);
        assert!((a.transform.translation() - t.translation()).norm() < 1e-3);
        assert!(compose_err_deg(&a.transform, &t) < 0.01);
        for &(i, j) in &a.inliers.pairs {
            let r = (p.points()[i] - a.transform.apply(&q.points()[j])).norm();
            assert!(r <= 0.1);
        }
        assert!(a.inliers.len() >= 140);
    }

    fn compose_err_deg(a: &RigidTransform, b: &RigidTransform) -> f64 {
        crate::geometry::compose(&b.inverse(), a).rotation_angle().to_degrees()
    }

    #[test]
    fn ransac_adaptive_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let t = random_transform(&mut rng, 3.0);
        let (p, q, m) = synthetic_matches(&mut rng, &t, 100, 100);
        let params = RansacParams { adaptive: true, ..Default::default() };
        let r = ransac_register(&p, &q, &m, &params).unwrap();
        assert_eq!(r.iterations_used, RANSAC_BLOCK);
        assert_eq!(r.inliers.len(), 100);
    }

    #[test]
    fn ransac_failures() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let t = RigidTransform::identity();
        let (p, q, m) = synthetic_matches(&mut rng, &t, 2, 2);
        assert!(matches!(
            ransac_register(&p, &q, &m, &RansacParams::default()),
            Err(RegistrationError::TooFewPairs { .. })
        ));
        // Collinear points cannot support any hypothesis.
        let line: Vec<Point> = (0..6).map(|i| Point::new(i as f64, 0.0, 0.0)).collect();
        let c = PointCloud::new(line).unwrap();
        let m = CorrespondenceSet { pairs: (0..6).map(|k| (k, k)).collect(), distances: vec![0.0; 6] };
        let params = RansacParams { max_iters: 50, ..Default::default() };
        assert!(matches!(
            ransac_register(&c, &c, &m, &params),
            Err(RegistrationError::NoConsensus { best: 0, .. })
        ));
    }

    #[test]
    fn icp_identity_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = PointCloud::new(random_points(&mut rng, 200, 1.0)).unwrap();
        let r = icp_refine(&c, &c, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert!(r.transform.translation().norm() < 1e-12);
    }

    #[test]
    fn icp_recovers_small_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = PointCloud::new(random_points(&mut rng, 1000, 1.0)).unwrap();
        let shift = Vector3::new(0.01, -0.004, 0.006).normalize() * 0.01;
        // q = p − shift, so the aligning transform is +shift.
        let q = apply_transform(&p, &RigidTransform::from_translation(-shift));
        let r = icp_refine(&p, &q, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        assert!((r.transform.translation() - shift).norm() < 1e-4);
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn icp_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let p = PointCloud::new(random_points(&mut rng, 400, 1.0)).unwrap();
            let t = RigidTransform::from_euler_xyz(0.1, -0.05, 0.08, Vector3::new(0.05, 0.02, -0.03));
            let q = apply_transform(&p, &t.inverse());
            let params = IcpParams { max_iters: 30, ..Default::default() };
            let r = icp_refine(&p, &q, &RigidTransform::identity(), &params).unwrap();
            assert!(r.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }
}

//! Evaluation formulas for matching, registration and detection.
//!
//! Indicator tests are strict: a correspondence is an inlier when its
//! residual is below `τ1`, a pair matches when its inlier ratio is above `τ2`,
//! a registration counts when its RMSE is below the threshold, and so on.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{compose, CorrespondenceSet, Point, PointCloud, RigidTransform};
use crate::neighborhood::NeighborhoodIndex;

/// Indoor inlier distance `τ1` in meters.
pub const DEFAULT_TAU1: f64 = 0.10;
/// Indoor inlier ratio threshold `τ2`.
pub const DEFAULT_TAU2: f64 = 0.05;
pub const DEFAULT_RMSE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_RTE_MAX: f64 = 2.0;
pub const DEFAULT_RRE_MAX_DEG: f64 = 5.0;
/// Keypoint counts of the repeatability sweep.
pub const REPEATABILITY_COUNTS: [usize; 8] = [4, 8, 16, 32, 64, 128, 256, 512];
/// Keypoint counts of the matching sweep.
pub const KEYPOINT_SWEEP: [usize; 5] = [5000, 2500, 1000, 500, 250];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no pairs to aggregate")]
    EmptyPairs,
    #[error("empty keypoint set")]
    EmptyKeypoints,
    #[error("empty ground-truth correspondence set")]
    EmptyCorrespondences,
    #[error("index {index} out of range for {len} points")]
    Index { index: usize, len: usize },
}

fn point_at(points: &[Point], index: usize) -> Result<Point, MetricsError> {
    points.get(index).copied().ok_or(MetricsError::Index {
        index,
        len: points.len(),
    })
}

/// Distances `‖p_i − T q_j‖` for every pair.
pub fn correspondence_residuals(
    matches: &CorrespondenceSet,
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t: &RigidTransform,
) -> Result<Vec<f64>, MetricsError> {
    matches
        .pairs
        .iter()
        .map(|&(i, j)| {
            let p = point_at(cloud_p.points(), i)?;
            let q = point_at(cloud_q.points(), j)?;
            Ok((p - t.apply(&q)).norm())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InlierRatio {
    pub ratio: f64,
    /// Set when there were no matches; the ratio is then 0.
    pub empty: bool,
}

/// Fraction of pairs with `‖p_i − T_gt q_j‖ < τ1`.
pub fn inlier_ratio(
    matches: &CorrespondenceSet,
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t_gt: &RigidTransform,
    tau1: f64,
) -> Result<InlierRatio, MetricsError> {
    if matches.is_empty() {
        log::warn!("inlier ratio of an empty match set taken as 0");
        return Ok(InlierRatio {
            ratio: 0.0,
            empty: true,
        });
    }
    let residuals = correspondence_residuals(matches, cloud_p, cloud_q, t_gt)?;
    let inliers = residuals.iter().filter(|&&r| r < tau1).count();
    Ok(InlierRatio {
        ratio: inliers as f64 / residuals.len() as f64,
        empty: false,
    })
}

/// How recalls over several pairs are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean of per-scene recalls.
    #[default]
    Scene,
    /// Plain fraction over all pairs.
    Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecall {
    pub scene: String,
    pub pairs: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSummary {
    pub recall: f64,
    /// Population standard deviation of the scene recalls.
    pub std: f64,
    /// Scenes in lexicographic order.
    pub scenes: Vec<SceneRecall>,
}

/// Aggregates per-pair pass/fail outcomes labelled by scene.
pub fn recall_by_scene<S: AsRef<str>>(
    outcomes: &[(S, bool)],
    aggregation: Aggregation,
) -> Result<RecallSummary, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (scene, ok) in outcomes {
        let e = per.entry(scene.as_ref()).or_default();
        e.0 += 1;
        e.1 += usize::from(*ok);
    }
    let scenes: Vec<SceneRecall> = per
        .into_iter()
        .map(|(scene, (n, hit))| SceneRecall {
            scene: scene.to_string(),
            pairs: n,
            recall: hit as f64 / n as f64,
        })
        .collect();
    let k = scenes.len() as f64;
    let mean = scenes.iter().map(|s| s.recall).sum::<f64>() / k;
    let std = (scenes.iter().map(|s| (s.recall - mean).powi(2)).sum::<f64>() / k).sqrt();
    let recall = match aggregation {
        Aggregation::Scene => mean,
        Aggregation::Pair => {
            outcomes.iter().filter(|(_, ok)| *ok).count() as f64 / outcomes.len() as f64
        }
    };
    Ok(RecallSummary {
        recall,
        std,
        scenes,
    })
}

/// Feature matching recall over `(scene, inlier ratio)` entries: a pair
/// matches when its ratio is strictly above `tau2`.
pub fn feature_matching_recall<S: AsRef<str>>(
    ratios: &[(S, f64)],
    tau2: f64,
    aggregation: Aggregation,
) -> Result<RecallSummary, MetricsError> {
    let outcomes: Vec<(&str, bool)> = ratios
        .iter()
        .map(|(s, r)| (s.as_ref(), *r > tau2))
        .collect();
    recall_by_scene(&outcomes, aggregation)
}

/// Ground-truth correspondences: each `q` paired with its nearest `p` under
/// `t_gt`, kept when closer than `radius`. Returned as `(i, j)` index pairs.
pub fn ground_truth_correspondences(
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t_gt: &RigidTransform,
    radius: f64,
) -> Vec<(usize, usize)> {
    let Ok(index) = NeighborhoodIndex::new(cloud_p.points().to_vec()) else {
        return Vec::new();
    };
    let r2 = radius * radius;
    cloud_q
        .points()
        .par_iter()
        .enumerate()
        .filter_map(|(j, q)| {
            let (i, d2) = index.nearest(&t_gt.apply(q));
            (d2 < r2).then_some((i, j))
        })
        .collect()
}

/// `sqrt(mean ‖p* − T̂ q*‖²)` over ground-truth correspondences `(p*, q*)`.
pub fn correspondence_rmse(
    gt: &[(Point, Point)],
    t_est: &RigidTransform,
) -> Result<f64, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyCorrespondences);
    }
    let sse: f64 = gt
        .iter()
        .map(|(p, q)| (p - t_est.apply(q)).norm_squared())
        .sum();
    Ok((sse / gt.len() as f64).sqrt())
}

/// Fraction of pairs whose RMSE over their ground-truth correspondences is
/// strictly below `rmse_threshold`.
pub fn registration_recall(
    pairs: &[(&[(Point, Point)], &RigidTransform)],
    rmse_threshold: f64,
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let mut hits = 0;
    for (gt, t) in pairs {
        if correspondence_rmse(gt, t)? < rmse_threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Relative translation error (meters) and rotation error (degrees) of the
/// error transform `T_gt⁻¹ · T_est`.
pub fn rte_rre(t_est: &RigidTransform, t_gt: &RigidTransform) -> (f64, f64) {
    let delta = compose(&t_gt.inverse(), t_est);
    (delta.translation().norm(), delta.rotation_angle().to_degrees())
}

/// Fraction of `(rte, rre)` entries with `rte < rte_max` and `rre < rre_max`.
pub fn success_rate(errors: &[(f64, f64)], rte_max: f64, rre_max: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let ok = errors
        .iter()
        .filter(|(te, re)| *te < rte_max && *re < rre_max)
        .count();
    Ok(ok as f64 / errors.len() as f64)
}

fn repeatable_fraction(
    from: &[Point],
    to: &[Point],
    threshold: f64,
) -> f64 {
    let index = NeighborhoodIndex::new(to.to_vec()).expect("non-empty keypoints");
    let t2 = threshold * threshold;
    let hits = from
        .iter()
        .filter(|p| index.nearest(p).1 < t2)
        .count();
    hits as f64 / from.len() as f64
}

/// Keypoints of `P` and of `Q` (the latter moved by `t_gt`) as coordinates.
fn keypoint_coords(
    kp_p: &[usize],
    kp_q: &[usize],
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t_gt: &RigidTransform,
) -> Result<(Vec<Point>, Vec<Point>), MetricsError> {
    if kp_p.is_empty() || kp_q.is_empty() {
        return Err(MetricsError::EmptyKeypoints);
    }
    let a = kp_p
        .iter()
        .map(|&i| point_at(cloud_p.points(), i))
        .collect::<Result<_, _>>()?;
    let b = kp_q
        .iter()
        .map(|&j| point_at(cloud_q.points(), j).map(|q| t_gt.apply(&q)))
        .collect::<Result<_, _>>()?;
    Ok((a, b))
}

/// Fraction of `P` keypoints whose nearest `Q` keypoint, moved into `P`'s frame
/// by `t_gt`, lies strictly closer than `threshold`.
pub fn relative_repeatability(
    kp_p: &[usize],
    kp_q: &[usize],
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t_gt: &RigidTransform,
    threshold: f64,
) -> Result<f64, MetricsError> {
    let (a, b) = keypoint_coords(kp_p, kp_q, cloud_p, cloud_q, t_gt)?;
    Ok(repeatable_fraction(&a, &b, threshold))
}

/// Mean of the `P → Q` and `Q → P` repeatability.
pub fn symmetric_repeatability(
    kp_p: &[usize],
    kp_q: &[usize],
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    t_gt: &RigidTransform,
    threshold: f64,
) -> Result<f64, MetricsError> {
    let (a, b) = keypoint_coords(kp_p, kp_q, cloud_p, cloud_q, t_gt)?;
    Ok(0.5 * (repeatable_fraction(&a, &b, threshold) + repeatable_fraction(&b, &a, threshold)))
}

/// Everything measured on one fragment pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub pair_id: String,
    pub scene: String,
    pub overlap: f64,
    /// Whether the pair belongs to the evaluation set (overlap above 30%).
    pub in_eval_set: bool,
    pub requested_keypoints: usize,
    pub keypoints: usize,
    pub num_matches: usize,
    pub inlier_ratio: f64,
    pub matched: bool,
    pub rmse: f64,
    pub registered: bool,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
}

/// Aggregate numbers for one keypoint count.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub requested_keypoints: usize,
    /// Smallest keypoint count actually used over the evaluated pairs.
    pub min_effective_keypoints: usize,
    pub pairs: usize,
    pub mean_inlier_ratio: f64,
    pub fmr: RecallSummary,
    pub registration_recall: RecallSummary,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatabilityRow {
    pub requested_keypoints: usize,
    pub pairs: usize,
    pub mean_repeatability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub mode: String,
    /// One entry per evaluated pair and keypoint count, in manifest order.
    pub pairs: Vec<PairEvaluation>,
    pub sweep: Vec<SweepRow>,
    pub repeatability: Vec<RepeatabilityRow>,
    pub failures: Vec<PairFailure>,
}

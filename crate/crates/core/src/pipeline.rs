//! End-to-end benchmark over a pair manifest.
//!
//! Per pair: load both fragments, voxel-downsample, run the network, pick
//! keypoints (random or by detection score), match descriptors, register with
//! RANSAC and evaluate every metric. The run is repeated for each keypoint
//! count of the sweep and repeatability is measured for each count of the
//! repeatability sweep. Pairs fail independently; a failure is recorded and
//! the run continues.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{score_map, select_keypoints};
use crate::geometry::{FeatureMap, Point, PointCloud, RigidTransform};
use crate::io::{read_manifest, read_ply, DatasetConfig, IoError, ManifestPair, PairManifest};
use crate::kpconv::{load_weights, network_forward, KpConvModel, WeightsError};
use crate::metrics::{
    correspondence_rmse, feature_matching_recall, ground_truth_correspondences, inlier_ratio,
    recall_by_scene, relative_repeatability, rte_rre, success_rate, Aggregation, BenchmarkReport,
    PairEvaluation, PairFailure, RecallSummary, RepeatabilityRow, SweepRow,
};
use crate::neighborhood::{build_index, radius_neighbors, voxel_downsample};
use crate::registration::{mutual_nn_matches, ransac_register, RansacParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Uniformly sampled points.
    Rand,
    /// Top detection scores.
    Pred,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rand" => Ok(Self::Rand),
            "pred" => Ok(Self::Pred),
            _ => Err(format!("unknown mode '{s}' (expected rand or pred)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rand => "rand",
            Self::Pred => "pred",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Stable seed for one pair, side and count, independent of thread
/// scheduling and of the pair's position in the manifest.
pub fn derive_seed(global: u64, pair_id: &str, salt: u64) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in pair_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ global.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Side {
    cloud: PointCloud,
    features: FeatureMap,
    scores: Option<Vec<f64>>,
}

struct Prepared {
    id: String,
    scene: String,
    overlap: f64,
    in_eval_set: bool,
    p: Side,
    q: Side,
    t_gt: RigidTransform,
    gt: Vec<(Point, Point)>,
}

fn prepare_side(
    path: &Path,
    config: &DatasetConfig,
    model: &KpConvModel,
    mode: Mode,
) -> Result<Side, String> {
    let raw = read_ply(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cloud = voxel_downsample(&raw, config.voxel_size).map_err(|e| e.to_string())?;
    let features = network_forward(model, &cloud).map_err(|e| e.to_string())?;
    let scores = match mode {
        Mode::Rand => None,
        Mode::Pred => {
            let index = build_index(&cloud);
            let lists = radius_neighbors(&index, cloud.points(), config.detection_radius)
                .map_err(|e| e.to_string())?;
            let s = score_map(&features.responses, &lists, config.saliency).map_err(|e| e.to_string())?;
            Some(s.scores)
        }
    };
    Ok(Side {
        cloud,
        features,
        scores,
    })
}

fn prepare(pair: &ManifestPair, config: &DatasetConfig, model: &KpConvModel, mode: Mode) -> Result<Prepared, String> {
    let p = prepare_side(&pair.fragment_a, config, model, mode)?;
    let q = prepare_side(&pair.fragment_b, config, model, mode)?;
    let gt: Vec<(Point, Point)> = ground_truth_correspondences(&p.cloud, &q.cloud, &pair.transform, config.gt_corr_radius)
        .into_iter()
        .map(|(i, j)| (p.cloud.points()[i], q.cloud.points()[j]))
        .collect();
    if gt.is_empty() {
        return Err("no ground-truth correspondences".into());
    }
    Ok(Prepared {
        id: pair.pair_id(),
        scene: pair.scene.clone(),
        overlap: pair.overlap,
        in_eval_set: pair.in_eval_set(),
        p,
        q,
        t_gt: pair.transform,
        gt,
    })
}

/// `k` keypoints of one side, clipped to the point count.
fn keypoints(side: &Side, k: usize, mode: Mode, seed: u64) -> Vec<usize> {
    let n = side.cloud.len();
    let k = k.min(n);
    match &side.scores {
        Some(scores) if mode == Mode::Pred => select_keypoints(scores, k)
            .map(|s| s.indices)
            .unwrap_or_default(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, k).into_vec()
        }
    }
}

fn evaluate(prep: &Prepared, config: &DatasetConfig, mode: Mode, k: usize) -> Result<PairEvaluation, String> {
    let seed = |side: u64| derive_seed(config.seed, &prep.id, (k as u64) << 2 | side);
    let sel_p = keypoints(&prep.p, k, mode, seed(0));
    let sel_q = keypoints(&prep.q, k, mode, seed(1));
    let matches = mutual_nn_matches(&prep.p.features, &prep.q.features, &sel_p, &sel_q).map_err(|e| e.to_string())?;
    let ratio = inlier_ratio(&matches, &prep.p.cloud, &prep.q.cloud, &prep.t_gt, config.tau1)
        .map_err(|e| e.to_string())?
        .ratio;
    let params = RansacParams {
        max_iters: config.ransac_iters,
        inlier_threshold: config.ransac_threshold,
        seed: seed(2),
        adaptive: config.ransac_adaptive,
        ..RansacParams::default()
    };
    let estimate = match ransac_register(&prep.p.cloud, &prep.q.cloud, &matches, &params) {
        Ok(r) => r.transform,
        Err(e) => {
            // An unregistered pair is scored as if left in place.
            log::warn!("{} ({k} keypoints): registration failed: {e}", prep.id);
            RigidTransform::identity()
        }
    };
    let rmse = correspondence_rmse(&prep.gt, &estimate).map_err(|e| e.to_string())?;
    let (rte, rre) = rte_rre(&estimate, &prep.t_gt);
    Ok(PairEvaluation {
        pair_id: prep.id.clone(),
        scene: prep.scene.clone(),
        overlap: prep.overlap,
        in_eval_set: prep.in_eval_set,
        requested_keypoints: k,
        keypoints: sel_p.len().min(sel_q.len()),
        num_matches: matches.len(),
        inlier_ratio: ratio,
        matched: ratio > config.tau2,
        rmse,
        registered: rmse < config.rmse_threshold,
        rte,
        rre,
        success: rte < config.rte_max && rre < config.rre_max,
    })
}

fn repeatability(prep: &Prepared, config: &DatasetConfig, mode: Mode, count: usize) -> Result<f64, String> {
    let seed = |side: u64| derive_seed(config.seed, &prep.id, (count as u64) << 2 | side | 1 << 62);
    let kp = keypoints(&prep.p, count, mode, seed(0));
    let kq = keypoints(&prep.q, count, mode, seed(1));
    relative_repeatability(&kp, &kq, &prep.p.cloud, &prep.q.cloud, &prep.t_gt, config.repeatability_threshold)
        .map_err(|e| e.to_string())
}

type PairOutcome = Result<(Vec<PairEvaluation>, Vec<f64>), String>;

fn run_pair(pair: &ManifestPair, config: &DatasetConfig, model: &KpConvModel, mode: Mode) -> PairOutcome {
    let prep = prepare(pair, config, model, mode)?;
    let evals = config
        .keypoint_sweep
        .iter()
        .map(|&k| evaluate(&prep, config, mode, k))
        .collect::<Result<Vec<_>, _>>()?;
    let reps = config
        .repeatability_counts
        .iter()
        .map(|&c| repeatability(&prep, config, mode, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((evals, reps))
}

fn undefined_recall() -> RecallSummary {
    RecallSummary {
        recall: f64::NAN,
        std: f64::NAN,
        scenes: Vec::new(),
    }
}

fn sweep_row(k: usize, evals: &[&PairEvaluation], config: &DatasetConfig) -> SweepRow {
    if evals.is_empty() {
        return SweepRow {
            requested_keypoints: k,
            min_effective_keypoints: 0,
            pairs: 0,
            mean_inlier_ratio: f64::NAN,
            fmr: undefined_recall(),
            registration_recall: undefined_recall(),
            success_rate: f64::NAN,
        };
    }
    let ratios: Vec<(&str, f64)> = evals.iter().map(|e| (e.scene.as_str(), e.inlier_ratio)).collect();
    let registered: Vec<(&str, bool)> = evals.iter().map(|e| (e.scene.as_str(), e.registered)).collect();
    let errors: Vec<(f64, f64)> = evals.iter().map(|e| (e.rte, e.rre)).collect();
    SweepRow {
        requested_keypoints: k,
        min_effective_keypoints: evals.iter().map(|e| e.keypoints).min().unwrap_or(0),
        pairs: evals.len(),
        mean_inlier_ratio: evals.iter().map(|e| e.inlier_ratio).sum::<f64>() / evals.len() as f64,
        fmr: feature_matching_recall(&ratios, config.tau2, Aggregation::Scene).expect("non-empty"),
        registration_recall: recall_by_scene(&registered, Aggregation::Scene).expect("non-empty"),
        success_rate: success_rate(&errors, config.rte_max, config.rre_max).expect("non-empty"),
    }
}

/// Runs the benchmark with an in-memory model. Aggregates cover the pairs of
/// the evaluation set (overlap above 30%); every pair is listed individually.
pub fn run_pipeline(config: &DatasetConfig, manifest: &PairManifest, model: &KpConvModel, mode: Mode) -> BenchmarkReport {
    let outcomes: Vec<PairOutcome> = manifest
        .pairs
        .par_iter()
        .map(|pair| run_pair(pair, config, model, mode))
        .collect();

    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    let mut rep_sums = vec![(0usize, 0.0f64); config.repeatability_counts.len()];
    for (pair, outcome) in manifest.pairs.iter().zip(outcomes) {
        match outcome {
            Ok((evals, reps)) => {
                if pair.in_eval_set() {
                    for (acc, r) in rep_sums.iter_mut().zip(reps) {
                        acc.0 += 1;
                        acc.1 += r;
                    }
                }
                pairs.extend(evals);
            }
            Err(error) => {
                log::warn!("{}: {error}", pair.pair_id());
                failures.push(PairFailure {
                    pair_id: pair.pair_id(),
                    error,
                });
            }
        }
    }
    let sweep = config
        .keypoint_sweep
        .iter()
        .map(|&k| {
            let evals: Vec<&PairEvaluation> = pairs
                .iter()
                .filter(|e| e.in_eval_set && e.requested_keypoints == k)
                .collect();
            sweep_row(k, &evals, config)
        })
        .collect();
    let repeatability = config
        .repeatability_counts
        .iter()
        .zip(rep_sums)
        .map(|(&c, (n, sum))| RepeatabilityRow {
            requested_keypoints: c,
            pairs: n,
            mean_repeatability: if n > 0 { sum / n as f64 } else { f64::NAN },
        })
        .collect();
    BenchmarkReport {
        mode: mode.to_string(),
        pairs,
        sweep,
        repeatability,
        failures,
    }
}

/// Loads the manifest and model from disk, then runs [`run_pipeline`].
pub fn run_pipeline_files(
    config: &DatasetConfig,
    manifest_path: &Path,
    model_path: &Path,
    mode: Mode,
) -> Result<BenchmarkReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let manifest = read_manifest(manifest_path)?;
    let model = load_weights(model_path)?;
    Ok(run_pipeline(config, &manifest, &model, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use crate::io::{write_ply, PlyEncoding, PlyPrecision};
    use crate::kpconv::ModelConfig;
    use crate::synthetic::{synthetic_scene, SceneParams};
    use nalgebra::Vector3;

    #[test]
    fn seeds_depend_on_all_inputs() {
        let s = derive_seed(1, "a/b-c", 3);
        assert_eq!(s, derive_seed(1, "a/b-c", 3));
        assert_ne!(s, derive_seed(2, "a/b-c", 3));
        assert_ne!(s, derive_seed(1, "a/b-d", 3));
        assert_ne!(s, derive_seed(1, "a/b-c", 4));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("rand".parse::<Mode>().unwrap(), Mode::Rand);
        assert_eq!(Mode::Pred.to_string(), "pred");
        assert!("best".parse::<Mode>().is_err());
    }

    fn small_config() -> DatasetConfig {
        let mut c = DatasetConfig::indoor();
        c.voxel_size = 0.05;
        c.first_grid = 0.05;
        c.detection_radius = 0.125;
        c.ransac_iters = 2000;
        c.keypoint_sweep = vec![400, 100];
        c.repeatability_counts = vec![4, 64];
        c
    }

    #[test]
    fn translated_copy_registers_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let scene = synthetic_scene(&SceneParams { extent: 0.8, spacing: 0.03, ..Default::default() });
        let t = RigidTransform::from_translation(Vector3::new(0.5, -0.25, 0.1));
        let b = apply_transform(&scene, &t.inverse());
        let (pa, pb) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        write_ply(&pa, &scene, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double).unwrap();
        write_ply(&pb, &b, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double).unwrap();
        let missing = dir.path().join("missing.ply");
        let manifest = PairManifest {
            pairs: vec![
                ManifestPair { scene: "s".into(), fragment_a: pa.clone(), fragment_b: pb, overlap: 1.0, transform: t },
                ManifestPair {
                    scene: "s".into(),
                    fragment_a: pa,
                    fragment_b: missing,
                    overlap: 1.0,
                    transform: RigidTransform::identity(),
                },
            ],
        };
        let config = small_config();
        let model = KpConvModel::random(ModelConfig::new(config.first_grid), 5).unwrap();
        let rand = run_pipeline(&config, &manifest, &model, Mode::Rand);
        let pred = run_pipeline(&config, &manifest, &model, Mode::Pred);
        for r in [&rand, &pred] {
            assert_eq!(r.failures.len(), 1);
            assert_eq!(r.pairs.len(), 2);
            assert_eq!(r.sweep.len(), 2);
            assert_eq!(r.sweep[0].success_rate, 1.0);
            assert_eq!(r.repeatability.len(), 2);
            assert!(r.pairs[0].keypoints <= 400);
        }
        assert_eq!(pred.pairs[0].requested_keypoints, 400);
        assert!(pred.repeatability.iter().all(|x| x.mean_repeatability > 0.0));
        assert_eq!(run_pipeline(&config, &manifest, &model, Mode::Pred), pred);
    }
}

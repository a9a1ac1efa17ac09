//! Acceptance suite. Each criterion prints one PASS/FAIL line.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kpfeat::detector::{
    d2_saliency_scores, hard_keypoints, saliency_scores, score_map, SaliencyKind,
};
use kpfeat::geometry::{CorrespondenceSet, FeatureMap, Point, PointCloud, RigidTransform};
use kpfeat::kpconv::{
    kernel_dispositions, kpconv_apply, network_forward, Affine, ConvLayer, KpConvModel,
    ModelConfig,
};
use kpfeat::metrics::{
    correspondence_rmse, feature_matching_recall, inlier_ratio, registration_recall,
    relative_repeatability, rte_rre, success_rate, Aggregation, KEYPOINT_SWEEP,
    REPEATABILITY_COUNTS,
};
use kpfeat::neighborhood::{build_index, radius_neighbors, NeighborLists};
use kpfeat::registration::{mutual_nn_matches, ransac_register, RansacParams};
use kpfeat::synthetic::random_pose;

/// 1 − (1 − 0.05³)^55258 = 0.99899993 falls just short of 0.999; the bound
/// first holds at 55259 iterations.
const KNOWN_FAILING: &[usize] = &[5];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
            )
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn brute_neighbors(points: &[Point], r: f64) -> NeighborLists {
    let r2 = r * r;
    NeighborLists::from_lists(
        points
            .iter()
            .map(|q| {
                (0..points.len())
                    .filter(|&j| (points[j] - q).norm_squared() <= r2)
                    .collect()
            })
            .collect(),
    )
}

fn density_normalized_convolution() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let radius = 0.25;
    let (d_in, d_out) = (4, 8);
    let weights = Array3::from_shape_fn((15, d_in, d_out), |_| rng.random_range(-1.0..1.0));
    let kernel = kernel_dispositions(15, radius).map_err(|e| e.to_string())?;
    let layer = ConvLayer::new(weights, radius, kernel, Affine::identity(d_out), false)
        .map_err(|e| e.to_string())?;
    let (mut norm_dev, mut sum_dev) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let center = Point::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0));
        let n = rng.random_range(1..=30);
        let pts: Vec<Point> = (0..n)
            .map(|_| loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() <= 1.0 {
                    break center + v * radius;
                }
            })
            .collect();
        let feats = random_matrix(&mut rng, n, d_in, -1.0, 1.0);
        let base_n = kpconv_apply(&center, &pts, feats.view(), &layer, true).map_err(|e| e.to_string())?;
        let base_s = kpconv_apply(&center, &pts, feats.view(), &layer, false).map_err(|e| e.to_string())?;
        for m in [2usize, 3, 5] {
            let dup_pts: Vec<Point> = (0..n * m).map(|r| pts[r % n]).collect();
            let dup_feats = Array2::from_shape_fn((n * m, d_in), |(r, c)| feats[[r % n, c]]);
            let nn = kpconv_apply(&center, &dup_pts, dup_feats.view(), &layer, true).map_err(|e| e.to_string())?;
            let ss = kpconv_apply(&center, &dup_pts, dup_feats.view(), &layer, false).map_err(|e| e.to_string())?;
            for k in 0..d_out {
                norm_dev = norm_dev.max((nn[k] - base_n[k]).abs());
                let expect = m as f64 * base_s[k];
                sum_dev = sum_dev.max((ss[k] - expect).abs() / expect.abs().max(1.0));
            }
        }
    }
    ensure(norm_dev < 1e-9, format!("normalized output moved by {norm_dev:e}"))?;
    ensure(sum_dev < 1e-12, format!("plain sum off from m× by {sum_dev:e} (relative)"))?;
    Ok(format!("normalized max dev {norm_dev:.1e}, plain sum scales by m within {sum_dev:.1e}"))
}

fn saliency_density() -> Check {
    let mut details = Vec::new();
    for n in [2usize, 10, 100] {
        let responses = Array2::from_elem((n, 3), 0.7);
        let lists = NeighborLists::from_lists(vec![(0..n).collect(); n]);
        let ours = saliency_scores(&responses, &lists).map_err(|e| e.to_string())?;
        let softmax = d2_saliency_scores(&responses, &lists).map_err(|e| e.to_string())?;
        for v in ours.iter() {
            ensure((v - 2f64.ln()).abs() < 1e-12, format!("n={n}: saliency {v} is not ln 2"))?;
        }
        for v in softmax.iter() {
            ensure(*v == 1.0 / n as f64, format!("n={n}: softmax score {v} is not 1/{n}"))?;
        }
        details.push(format!("n={n}: softmax {:.3}", softmax[[0, 0]]));
    }
    Ok(format!("saliency = ln 2 at every size; {}", details.join(", ")))
}

fn translation_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = KpConvModel::random(ModelConfig::new(0.03), 11).map_err(|e| e.to_string())?;
    let cloud = PointCloud::new(random_points(&mut rng, 500, 0.4)).map_err(|e| e.to_string())?;
    let moved = cloud
        .translated(&Vector3::new(10.0, -7.0, 3.0))
        .map_err(|e| e.to_string())?;
    let a = network_forward(&model, &cloud).map_err(|e| e.to_string())?;
    let b = network_forward(&model, &moved).map_err(|e| e.to_string())?;
    let dev = a
        .descriptors
        .iter()
        .zip(b.descriptors.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(dev < 1e-6, format!("descriptors moved by {dev:e}"))?;
    Ok(format!("max descriptor difference {dev:.1e}"))
}

fn hard_criterion_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 300, 1.0);
    let responses = random_matrix(&mut rng, 300, 8, 0.0, 1.0);
    let cloud = PointCloud::new(pts.clone()).map_err(|e| e.to_string())?;
    let lists = radius_neighbors(&build_index(&cloud), &pts, 0.15).map_err(|e| e.to_string())?;
    let got = hard_keypoints(&responses, &lists).map_err(|e| e.to_string())?;
    let r2 = 0.15 * 0.15;
    let mut expect = Vec::new();
    for i in 0..300 {
        let mut k = 0;
        for c in 1..8 {
            if responses[[i, c]] > responses[[i, k]] {
                k = c;
            }
        }
        let mut best: Option<usize> = None;
        for j in 0..300 {
            if (pts[j] - pts[i]).norm_squared() <= r2
                && best.is_none_or(|b| responses[[j, k]] > responses[[b, k]])
            {
                best = Some(j);
            }
        }
        if best == Some(i) {
            expect.push(i);
        }
    }
    ensure(got == expect, format!("{} keypoints vs {} from the oracle", got.len(), expect.len()))?;
    Ok(format!("{} keypoints, identical to the direct evaluation", got.len()))
}

fn ransac_confidence_identity() -> Check {
    let conf = 1.0 - (1.0 - 0.05f64.powi(3)).powf(55258.0);
    ensure(conf >= 0.999, format!("1 - (1 - 0.05^3)^55258 = {conf:.10} < 0.999"))?;
    Ok(format!("confidence {conf:.10}"))
}

fn synthetic_registration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = random_pose(&mut rng, 180.0, 2.0, None);
    let q = random_points(&mut rng, 200, 2.0);
    let p: Vec<Point> = q
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if i < 140 {
                t.apply(x)
            } else {
                Point::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            }
        })
        .collect();
    let cp = PointCloud::new(p).map_err(|e| e.to_string())?;
    let cq = PointCloud::new(q).map_err(|e| e.to_string())?;
    let matches = CorrespondenceSet {
        pairs: (0..200).map(|i| (i, i)).collect(),
        distances: vec![0.0; 200],
    };
    let params = RansacParams {
        max_iters: 50_000,
        inlier_threshold: 0.1,
        seed: 17,
        ..Default::default()
    };
    let res = ransac_register(&cp, &cq, &matches, &params).map_err(|e| e.to_string())?;
    let (rte, rre) = rte_rre(&res.transform, &t);
    let rate = success_rate(&[(rte, rre)], 2.0, 5.0).map_err(|e| e.to_string())?;
    ensure(rte < 1e-3 && rre < 0.01, format!("RTE {rte:e} m, RRE {rre:e} deg"))?;
    ensure(rate == 1.0, format!("success rate {rate}"))?;
    Ok(format!(
        "RTE {rte:.1e} m, RRE {rre:.1e} deg, {} inliers, success rate {rate}",
        res.inliers.len()
    ))
}

fn metric_fixtures() -> Check {
    let id = RigidTransform::identity();
    let err = |e: kpfeat::metrics::MetricsError| e.to_string();

    // Residuals 0, 0.0625 and 0.25.
    let p = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0625, 0.0, 0.0], [2.25, 0.0, 0.0]]).map_err(|e| e.to_string())?;
    let q = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).map_err(|e| e.to_string())?;
    let three = CorrespondenceSet { pairs: vec![(0, 0), (1, 1), (2, 2)], distances: vec![0.0; 3] };
    let ir = inlier_ratio(&three, &p, &q, &id, 0.1).map_err(err)?.ratio;
    ensure(ir == 2.0 / 3.0, format!("inlier ratio {ir}"))?;
    let boundary = PointCloud::from_xyz(&[[0.1, 0.0, 0.0]]).map_err(|e| e.to_string())?;
    let origin = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).map_err(|e| e.to_string())?;
    let one = CorrespondenceSet { pairs: vec![(0, 0)], distances: vec![0.0] };
    let at_tau = inlier_ratio(&one, &boundary, &origin, &id, 0.1).map_err(err)?.ratio;
    ensure(at_tau == 0.0, "residual equal to τ1 counted as inlier")?;

    let fmr = feature_matching_recall(&[("s", 0.05), ("s", 0.0500001), ("s", 0.3)], 0.05, Aggregation::Pair)
        .map_err(err)?
        .recall;
    ensure(fmr == 2.0 / 3.0, format!("FMR {fmr} with one ratio at τ2"))?;

    let at_thr = [(Point::new(0.2, 0.0, 0.0), Point::zeros())];
    let below = [(Point::new(0.19, 0.0, 0.0), Point::zeros())];
    let rmse = correspondence_rmse(&at_thr, &id).map_err(err)?;
    ensure(rmse == 0.2, format!("rmse {rmse}"))?;
    let rr = registration_recall(&[(&at_thr[..], &id), (&below[..], &id)], 0.2).map_err(err)?;
    ensure(rr == 0.5, format!("registration recall {rr}"))?;

    let kp = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        .map_err(|e| e.to_string())?;
    let kq = PointCloud::from_xyz(&[[0.05, 0.0, 0.0], [1.0, 0.0, 0.0], [2.1, 0.0, 0.0], [3.5, 0.0, 0.0]])
        .map_err(|e| e.to_string())?;
    let rep = relative_repeatability(&[0, 1, 2, 3], &[0, 1, 2, 3], &kp, &kq, &id, 0.1).map_err(err)?;
    ensure(rep == 0.5, format!("repeatability {rep}"))?;
    Ok(format!("inlier ratio {ir:.4}, FMR {fmr:.4}, RR {rr}, repeatability {rep}"))
}

fn brute_force_equivalences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let pts = random_points(&mut rng, 2000, 1.0);
    let cloud = PointCloud::new(pts.clone()).map_err(|e| e.to_string())?;
    let lists = radius_neighbors(&build_index(&cloud), &pts, 0.1).map_err(|e| e.to_string())?;
    let oracle = brute_neighbors(&pts, 0.1);
    for i in 0..pts.len() {
        ensure(lists.get(i) == oracle.get(i), format!("radius neighbors differ at {i}"))?;
    }

    let desc = |rng: &mut ChaCha8Rng, n: usize| {
        let raw = random_matrix(rng, n, 32, -1.0, 1.0);
        FeatureMap::from_head_output(&raw)
    };
    let fp = desc(&mut rng, 1500);
    let fq = desc(&mut rng, 1800);
    let sel_p: Vec<usize> = (0..1500).step_by(2).collect();
    let sel_q: Vec<usize> = (0..1800).rev().collect();
    let m = mutual_nn_matches(&fp, &fq, &sel_p, &sel_q).map_err(|e| e.to_string())?;
    let d2 = |a: usize, b: usize| {
        fp.descriptors
            .row(a)
            .iter()
            .zip(fq.descriptors.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    let nn_q = |a: usize| *sel_q.iter().min_by(|&&x, &&y| d2(a, x).total_cmp(&d2(a, y)).then(x.cmp(&y))).unwrap();
    let nn_p = |b: usize| *sel_p.iter().min_by(|&&x, &&y| d2(x, b).total_cmp(&d2(y, b)).then(x.cmp(&y))).unwrap();
    let mut expect = HashSet::new();
    for &a in &sel_p {
        let b = nn_q(a);
        if nn_p(b) == a {
            expect.insert((a, b));
        }
    }
    let got: HashSet<(usize, usize)> = m.pairs.iter().copied().collect();
    ensure(got == expect, format!("{} mutual matches vs {} from the oracle", got.len(), expect.len()))?;
    for (&(a, b), d) in m.pairs.iter().zip(&m.distances) {
        ensure((d - d2(a, b).sqrt()).abs() < 1e-12, format!("match distance off at ({a}, {b})"))?;
    }

    let responses = random_matrix(&mut rng, 2000, 16, 0.0, 2.0);
    let sm = score_map(&responses, &oracle, SaliencyKind::DensityInvariant).map_err(|e| e.to_string())?;
    let mut score_dev = 0.0f64;
    for i in 0..2000 {
        let nb = oracle.get(i);
        let row_max = responses.row(i).iter().copied().fold(0.0, f64::max);
        let mut s = 0.0f64;
        for k in 0..16 {
            let mean = nb.iter().map(|&j| responses[[j, k]]).sum::<f64>() / nb.len() as f64;
            let alpha = (1.0 + (responses[[i, k]] - mean).exp()).ln();
            let beta = responses[[i, k]] / row_max;
            s = s.max(alpha * beta);
        }
        score_dev = score_dev.max((s - sm.scores[i]).abs());
    }
    ensure(score_dev < 1e-12, format!("detection scores off by {score_dev:e}"))?;

    let other: Vec<Point> = random_points(&mut rng, 2000, 1.0);
    let cq = PointCloud::new(other.clone()).map_err(|e| e.to_string())?;
    let t = random_pose(&mut rng, 20.0, 0.1, None);
    let kp_p: Vec<usize> = (0..2000).step_by(2).collect();
    let kp_q: Vec<usize> = (0..2000).step_by(3).collect();
    let rep = relative_repeatability(&kp_p, &kp_q, &cloud, &cq, &t, 0.05).map_err(|e| e.to_string())?;
    let moved: Vec<Point> = kp_q.iter().map(|&j| t.apply(&other[j])).collect();
    let hits = kp_p
        .iter()
        .filter(|&&i| moved.iter().any(|q| (pts[i] - q).norm_squared() < 0.05 * 0.05))
        .count();
    let expect_rep = hits as f64 / kp_p.len() as f64;
    ensure(rep == expect_rep, format!("repeatability {rep} vs {expect_rep}"))?;

    Ok(format!(
        "{} mutual matches, score dev {score_dev:.1e}, repeatability {rep:.4}",
        got.len()
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kpfeat"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("kpfeat {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn evaluate_twice(dir: &Path) -> Result<(String, Duration), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (ds, model) = (dir.join("ds"), dir.join("model.bin"));
    run_cli(&["synth", "--out-dir", &s(&ds), "--seed", "9"])?;
    run_cli(&["init-model", "--out", &s(&model), "--seed", "9"])?;
    let manifest = s(&ds.join("pairs.txt"));
    let start = Instant::now();
    let mut reports = Vec::new();
    for name in ["r1.csv", "r2.csv"] {
        let out = s(&dir.join(name));
        run_cli(&["evaluate", "--manifest", &manifest, "--model", &s(&model), "--out", &out])?;
        reports.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed();
    ensure(reports[0] == reports[1], "reports differ between runs")?;
    Ok((String::from_utf8(reports.swap_remove(0)).map_err(|e| e.to_string())?, elapsed))
}

fn sweep_rows(csv: &str) -> Check {
    let mut sweep = BTreeSet::new();
    let mut rep = BTreeSet::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let k = cols.get(3).and_then(|k| k.parse::<usize>().ok());
        match (cols[0], cols.get(4), k) {
            ("sweep", Some(&"fmr"), Some(k)) => {
                sweep.insert(k);
            }
            ("repeatability", Some(&"mean_repeatability"), Some(k)) => {
                rep.insert(k);
            }
            _ => {}
        }
    }
    let want_sweep: BTreeSet<usize> = KEYPOINT_SWEEP.into_iter().collect();
    let want_rep: BTreeSet<usize> = REPEATABILITY_COUNTS.into_iter().collect();
    ensure(sweep == want_sweep, format!("sweep rows {sweep:?}"))?;
    ensure(rep == want_rep, format!("repeatability rows {rep:?}"))?;
    Ok(format!("sweep {sweep:?}, repeatability {rep:?}"))
}

#[test]
fn acceptance_criteria() {
    let mut out = std::io::stdout();
    let mut results = Vec::new();
    let mut record = |id: usize, name: &str, limit: Duration, elapsed: Duration, check: Check| {
        let check = check.and_then(|d| {
            ensure(elapsed < limit, format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
                .map(|_| d)
        });
        let (tag, detail) = match &check {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        // Written straight to stdout so the lines survive output capture.
        let _ = writeln!(out, "criterion {id:>2} {tag} [{name}] ({:.2} s) {detail}", elapsed.as_secs_f64());
        results.push((id, check.is_ok()));
    };
    let timed = |f: fn() -> Check| {
        let t = Instant::now();
        let r = f();
        (t.elapsed(), r)
    };

    let secs = Duration::from_secs;
    let (t, r) = timed(density_normalized_convolution);
    record(1, "density-normalized convolution", secs(1), t, r);
    let (t, r) = timed(saliency_density);
    record(2, "saliency density invariance", secs(1), t, r);
    let (t, r) = timed(translation_invariance);
    record(3, "translation invariance", secs(10), t, r);
    let (t, r) = timed(hard_criterion_oracle);
    record(4, "hard detection oracle", secs(5), t, r);
    let (t, r) = timed(ransac_confidence_identity);
    record(5, "RANSAC confidence identity", secs(1), t, r);
    let (t, r) = timed(synthetic_registration);
    record(6, "synthetic registration", secs(30), t, r);
    let (t, r) = timed(metric_fixtures);
    record(7, "metric fixtures", secs(1), t, r);
    let (t, r) = timed(brute_force_equivalences);
    record(8, "brute-force equivalences", secs(60), t, r);

    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let evaluated = evaluate_twice(dir.path());
    let setup = t.elapsed();
    match evaluated {
        Ok((csv, elapsed)) => {
            record(9, "evaluate determinism", secs(120), elapsed, Ok("reports byte-identical".into()));
            let t = Instant::now();
            let r = sweep_rows(&csv);
            record(10, "keypoint-count sweep rows", secs(1), t.elapsed(), r);
        }
        Err(e) => {
            record(9, "evaluate determinism", secs(120), setup, Err(e.clone()));
            record(10, "keypoint-count sweep rows", secs(1), Duration::ZERO, Err(e));
        }
    }

    let unexpected: Vec<usize> = results
        .iter()
        .filter(|(id, ok)| !ok && !KNOWN_FAILING.contains(id))
        .map(|(id, _)| *id)
        .collect();
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}

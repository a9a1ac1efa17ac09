//! CSV and plain-text tables.
//!
//! The benchmark report is written in long form with the columns
//! `section,pair_id,scene,keypoints,metric,value`, where `section` is one of
//! `pair`, `sweep`, `scene`, `repeatability` or `failure`.

use std::fmt::Write as _;

use super::IoError;
use crate::geometry::{CorrespondenceSet, PointCloud};
use crate::metrics::{BenchmarkReport, RecallSummary};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, IoError> {
    let bytes = w.into_inner().map_err(|e| IoError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
}

/// `index,x,y,z,score` per keypoint.
pub fn keypoints_csv(cloud: &PointCloud, indices: &[usize], scores: &[f64]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "x", "y", "z", "score"])?;
    for (&i, s) in indices.iter().zip(scores) {
        let p = cloud.points()[i];
        w.write_record([i.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string(), s.to_string()])?;
    }
    finish(w)
}

/// `p_index,q_index,distance` per pair.
pub fn correspondences_csv(set: &CorrespondenceSet) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["p_index", "q_index", "distance"])?;
    for (&(i, j), d) in set.pairs.iter().zip(&set.distances) {
        w.write_record([i.to_string(), j.to_string(), d.to_string()])?;
    }
    finish(w)
}

struct Rows(csv::Writer<Vec<u8>>);

impl Rows {
    fn push(&mut self, section: &str, pair: &str, scene: &str, k: Option<usize>, metric: &str, value: impl ToString) -> Result<(), IoError> {
        let k = k.map(|k| k.to_string()).unwrap_or_default();
        self.0
            .write_record([section, pair, scene, &k, metric, &value.to_string()])?;
        Ok(())
    }

    fn recall(&mut self, k: usize, name: &str, r: &RecallSummary) -> Result<(), IoError> {
        self.push("sweep", "", "", Some(k), name, r.recall)?;
        self.push("sweep", "", "", Some(k), &format!("{name}_std"), r.std)?;
        for s in &r.scenes {
            self.push("scene", "", &s.scene, Some(k), name, s.recall)?;
        }
        Ok(())
    }
}

pub fn report_csv(report: &BenchmarkReport) -> Result<String, IoError> {
    let mut w = Rows(csv::Writer::from_writer(Vec::new()));
    w.0.write_record(["section", "pair_id", "scene", "keypoints", "metric", "value"])?;
    for p in &report.pairs {
        let k = Some(p.requested_keypoints);
        let (id, sc) = (p.pair_id.as_str(), p.scene.as_str());
        w.push("pair", id, sc, k, "overlap", p.overlap)?;
        w.push("pair", id, sc, k, "in_eval_set", u8::from(p.in_eval_set))?;
        w.push("pair", id, sc, k, "effective_keypoints", p.keypoints)?;
        w.push("pair", id, sc, k, "num_matches", p.num_matches)?;
        w.push("pair", id, sc, k, "inlier_ratio", p.inlier_ratio)?;
        w.push("pair", id, sc, k, "matched", u8::from(p.matched))?;
        w.push("pair", id, sc, k, "rmse", p.rmse)?;
        w.push("pair", id, sc, k, "registered", u8::from(p.registered))?;
        w.push("pair", id, sc, k, "rte", p.rte)?;
        w.push("pair", id, sc, k, "rre", p.rre)?;
        w.push("pair", id, sc, k, "success", u8::from(p.success))?;
    }
    for row in &report.sweep {
        let k = row.requested_keypoints;
        w.push("sweep", "", "", Some(k), "pairs", row.pairs)?;
        w.push("sweep", "", "", Some(k), "min_effective_keypoints", row.min_effective_keypoints)?;
        w.push("sweep", "", "", Some(k), "mean_inlier_ratio", row.mean_inlier_ratio)?;
        w.recall(k, "fmr", &row.fmr)?;
        w.recall(k, "registration_recall", &row.registration_recall)?;
        w.push("sweep", "", "", Some(k), "success_rate", row.success_rate)?;
    }
    for row in &report.repeatability {
        let k = Some(row.requested_keypoints);
        w.push("repeatability", "", "", k, "pairs", row.pairs)?;
        w.push("repeatability", "", "", k, "mean_repeatability", row.mean_repeatability)?;
    }
    for f in &report.failures {
        w.push("failure", &f.pair_id, "", None, "error", &f.error)?;
    }
    finish(w.0)
}

/// Human-readable summary of the sweeps.
pub fn report_table(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", report.mode);
    let _ = writeln!(
        s,
        "{:>9} {:>7} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "keypoints", "pairs", "inl.ratio", "FMR", "FMR std", "RR", "RR std", "success"
    );
    for r in &report.sweep {
        let _ = writeln!(
            s,
            "{:>9} {:>7} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.requested_keypoints,
            r.pairs,
            r.mean_inlier_ratio,
            r.fmr.recall,
            r.fmr.std,
            r.registration_recall.recall,
            r.registration_recall.std,
            r.success_rate
        );
    }
    if !report.repeatability.is_empty() {
        let _ = writeln!(s, "\n{:>9} {:>7} {:>13}", "keypoints", "pairs", "repeatability");
        for r in &report.repeatability {
            let _ = writeln!(s, "{:>9} {:>7} {:>13.4}", r.requested_keypoints, r.pairs, r.mean_repeatability);
        }
    }
    if !report.failures.is_empty() {
        let _ = writeln!(s, "\nfailed pairs:");
        for f in &report.failures {
            let _ = writeln!(s, "  {}: {}", f.pair_id, f.error);
        }
    }
    s
}

//! Pose files: blocks of one header line followed by a row-major 4×4 matrix
//! on four lines. Lines starting with `#` and blank lines are skipped. The
//! layout matches the `gt.log` trajectory files of common indoor benchmarks,
//! where the header is `<id_a> <id_b> <n_fragments>`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::{parse_err, IoError};
use crate::geometry::{orthonormality_error, RigidTransform};

/// Largest deviation from a rigid matrix that is repaired on load.
pub const POSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEntry {
    /// Header tokens, usually the two fragment ids.
    pub ids: Vec<String>,
    pub transform: RigidTransform,
}

/// Checks that `m` is rigid within [`POSE_TOL`] and projects its rotation
/// block onto the nearest rotation.
pub fn rigid_from_matrix4(m: &Matrix4<f64>, line: usize) -> Result<RigidTransform, IoError> {
    let bottom = (m[(3, 0)].abs())
        .max(m[(3, 1)].abs())
        .max(m[(3, 2)].abs())
        .max((m[(3, 3)] - 1.0).abs());
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
    let deviation = bottom.max(orthonormality_error(&r)).max((r.determinant() - 1.0).abs());
    if !deviation.is_finite() || deviation > POSE_TOL || !t.iter().all(|v| v.is_finite()) {
        return Err(IoError::NotRigid { line, deviation });
    }
    let svd = r.svd(true, true);
    let rot = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => return Err(IoError::NotRigid { line, deviation }),
    };
    Ok(RigidTransform::new(rot, t)?)
}

/// Numbered non-empty, non-comment lines.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Reads the four matrix rows following a header.
pub(crate) fn parse_matrix<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    header_line: usize,
) -> Result<(Matrix4<f64>, usize), IoError> {
    let mut m = Matrix4::zeros();
    let mut first = header_line;
    for r in 0..4 {
        let (n, l) = lines
            .next()
            .ok_or_else(|| parse_err(header_line, format!("matrix row {} missing", r + 1)))?;
        if r == 0 {
            first = n;
        }
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(n, format!("bad number '{v}'"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 4 {
            return Err(parse_err(n, format!("expected 4 values, found {}", vals.len())));
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok((m, first))
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseEntry>, IoError> {
    let mut lines = content_lines(text);
    let mut out = Vec::new();
    while let Some((n, header)) = lines.next() {
        let ids: Vec<String> = header.split_whitespace().map(str::to_string).collect();
        let (m, first) = parse_matrix(&mut lines, n)?;
        out.push(PoseEntry {
            ids,
            transform: rigid_from_matrix4(&m, first)?,
        });
    }
    Ok(out)
}

pub fn read_pose_file(path: impl AsRef<Path>) -> Result<Vec<PoseEntry>, IoError> {
    parse_poses(&fs::read_to_string(path)?)
}

pub(crate) fn matrix_lines(t: &RigidTransform) -> String {
    let m = t.to_matrix4();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Writes entries so that [`parse_poses`] reads back the same values.
pub fn poses_to_string(entries: &[PoseEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.ids.join(" "));
        s.push('\n');
        s.push_str(&matrix_lines(&e.transform));
    }
    s
}

pub fn write_pose_file(path: impl AsRef<Path>, entries: &[PoseEntry]) -> Result<(), IoError> {
    fs::write(path, poses_to_string(entries))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_quarter_turn() {
        let text = "# gt\n0 1 5\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\n\
                    0 2 5\n0 -1 0 1.5\n1 0 0 0\n0 0 1 -2\n0 0 0 1\n";
        let poses = parse_poses(text).unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].ids, vec!["0", "1", "5"]);
        assert_eq!(poses[0].transform, RigidTransform::identity());
        let want = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::new(1.5, 0.0, -2.0));
        assert!((poses[1].transform.to_matrix4() - want.to_matrix4()).abs().max() < 1e-12);
    }

    #[test]
    fn near_rigid_is_repaired_and_far_is_rejected() {
        let text = "a b\n1 1e-7 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        let p = parse_poses(text).unwrap();
        assert!(orthonormality_error(p[0].transform.rotation()) < 1e-12);
        let bad = "a b\n1 0.01 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        assert!(matches!(parse_poses(bad), Err(IoError::NotRigid { line: 2, .. })));
        let mirror = "a b\n-1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        assert!(matches!(parse_poses(mirror), Err(IoError::NotRigid { .. })));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse_poses("a b\n1 0 0\n"), Err(IoError::Parse { line: 2, .. })));
        assert!(matches!(parse_poses("a b\n1 0 0 x\n"), Err(IoError::Parse { line: 2, .. })));
        assert!(matches!(parse_poses("a b\n1 0 0 0\n"), Err(IoError::Parse { .. })));
    }

    #[test]
    fn writer_round_trips() {
        let entries: Vec<PoseEntry> = (0..5)
            .map(|k| PoseEntry {
                ids: vec![k.to_string(), (k + 1).to_string()],
                transform: RigidTransform::from_euler_xyz(0.3 * k as f64, -0.7, 1.9, Vector3::new(k as f64, 0.1, -3.3)),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.log");
        write_pose_file(&path, &entries).unwrap();
        let back = read_pose_file(&path).unwrap();
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.ids, b.ids);
            assert!((a.transform.to_matrix4() - b.transform.to_matrix4()).abs().max() < 1e-15);
        }
    }
}

//! Pair manifests. Each pair is a header line
//!
//! ```text
//! <scene> <fragment_a.ply> <fragment_b.ply> <overlap>
//! ```
//!
//! followed by the row-major 4×4 ground-truth transform taking fragment B
//! into the frame of fragment A. Relative fragment paths are resolved against
//! the manifest's directory. `#` comments and blank lines are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::pose::{content_lines, matrix_lines, parse_matrix, rigid_from_matrix4};
use super::{parse_err, IoError};
use crate::geometry::RigidTransform;

/// Pairs with more overlap than this form the evaluation set.
pub const OVERLAP_THRESHOLD: f64 = 0.30;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestPair {
    pub scene: String,
    pub fragment_a: PathBuf,
    pub fragment_b: PathBuf,
    pub overlap: f64,
    pub transform: RigidTransform,
}

impl ManifestPair {
    pub fn in_eval_set(&self) -> bool {
        self.overlap > OVERLAP_THRESHOLD
    }

    /// `<scene>/<stem_a>-<stem_b>`.
    pub fn pair_id(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        format!("{}/{}-{}", self.scene, stem(&self.fragment_a), stem(&self.fragment_b))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    pub pairs: Vec<ManifestPair>,
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<PairManifest, IoError> {
    let mut lines = content_lines(text);
    let mut pairs = Vec::new();
    while let Some((n, header)) = lines.next() {
        let tok: Vec<&str> = header.split_whitespace().collect();
        let [scene, a, b, overlap] = tok.as_slice() else {
            return Err(parse_err(n, "expected '<scene> <a> <b> <overlap>'"));
        };
        let overlap: f64 = overlap
            .parse()
            .map_err(|_| parse_err(n, format!("bad overlap '{overlap}'")))?;
        if !(0.0..=1.0).contains(&overlap) {
            return Err(parse_err(n, format!("overlap {overlap} outside [0, 1]")));
        }
        let (m, first) = parse_matrix(&mut lines, n)?;
        pairs.push(ManifestPair {
            scene: scene.to_string(),
            fragment_a: base.join(a),
            fragment_b: base.join(b),
            overlap,
            transform: rigid_from_matrix4(&m, first)?,
        });
    }
    Ok(PairManifest { pairs })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<PairManifest, IoError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&fs::read_to_string(path)?, base)
}

/// Writes `manifest` with fragment paths made relative to `base` where possible.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &PairManifest, base: &Path) -> Result<(), IoError> {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::new();
    for p in &manifest.pairs {
        s.push_str(&format!(
            "{} {} {} {}\n",
            p.scene,
            rel(&p.fragment_a),
            rel(&p.fragment_b),
            p.overlap
        ));
        s.push_str(&matrix_lines(&p.transform));
    }
    fs::write(path, s)?;
    Ok(())
}

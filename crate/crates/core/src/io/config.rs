//! Dataset configuration as `key = value` text.
//!
//! A `profile` key (`indoor` or `outdoor`) selects the defaults; any other key
//! overrides one value. `#` starts a comment. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `profile` | `indoor` or `outdoor` |
//! | `voxel_size` | downsampling voxel (m) |
//! | `first_grid` | first network subsampling grid (m) |
//! | `detection_radius` | neighborhood radius of the saliency score (m) |
//! | `tau1` | inlier distance (m) |
//! | `tau2` | inlier ratio threshold |
//! | `gt_corr_radius` | ground-truth correspondence radius (m) |
//! | `ransac_iters`, `ransac_threshold`, `ransac_adaptive` | RANSAC settings |
//! | `rmse_threshold` | registration recall RMSE bound (m) |
//! | `rte_max`, `rre_max` | success bounds (m, degrees) |
//! | `repeatability_threshold` | repeatability distance (m) |
//! | `num_keypoints` | default keypoint count |
//! | `keypoint_sweep`, `repeatability_counts` | comma-separated counts |
//! | `saliency` | `density` or `softmax` |
//! | `seed` | global seed |
//! | `pair_list` | manifest path |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{parse_err, IoError};
use crate::detector::SaliencyKind;
use crate::metrics::{KEYPOINT_SWEEP, REPEATABILITY_COUNTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Indoor,
    Outdoor,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "indoor" => Ok(Self::Indoor),
            "outdoor" => Ok(Self::Outdoor),
            _ => Err(format!("unknown profile '{s}'")),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Self::Indoor => "indoor",
            Self::Outdoor => "outdoor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub profile: Profile,
    pub voxel_size: f64,
    pub first_grid: f64,
    pub detection_radius: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub gt_corr_radius: f64,
    pub ransac_iters: usize,
    pub ransac_threshold: f64,
    pub ransac_adaptive: bool,
    pub rmse_threshold: f64,
    pub rte_max: f64,
    pub rre_max: f64,
    pub repeatability_threshold: f64,
    pub num_keypoints: usize,
    pub keypoint_sweep: Vec<usize>,
    pub repeatability_counts: Vec<usize>,
    pub saliency: SaliencyKind,
    pub seed: u64,
    pub pair_list: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value '{v}' for {key}"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl DatasetConfig {
    pub fn indoor() -> Self {
        let voxel = 0.03;
        Self {
            profile: Profile::Indoor,
            voxel_size: voxel,
            first_grid: voxel,
            detection_radius: 2.5 * voxel,
            tau1: 0.10,
            tau2: 0.05,
            gt_corr_radius: 0.10,
            ransac_iters: 50_000,
            ransac_threshold: 0.10,
            ransac_adaptive: false,
            rmse_threshold: 0.2,
            rte_max: 2.0,
            rre_max: 5.0,
            repeatability_threshold: 0.1,
            num_keypoints: 5000,
            keypoint_sweep: KEYPOINT_SWEEP.to_vec(),
            repeatability_counts: REPEATABILITY_COUNTS.to_vec(),
            saliency: SaliencyKind::DensityInvariant,
            seed: 0,
            pair_list: None,
        }
    }

    pub fn outdoor() -> Self {
        let voxel = 0.30;
        Self {
            profile: Profile::Outdoor,
            voxel_size: voxel,
            first_grid: voxel,
            detection_radius: 2.5 * voxel,
            tau1: 0.5,
            gt_corr_radius: 0.5,
            ransac_threshold: 0.5,
            repeatability_threshold: 0.5,
            ..Self::indoor()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Indoor => Self::indoor(),
            Profile::Outdoor => Self::outdoor(),
        }
    }

    /// Overrides one value by key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "profile" => {
                let p: Profile = v.parse()?;
                if p != self.profile {
                    return Err("profile must be chosen before other keys".into());
                }
            }
            "voxel_size" => self.voxel_size = parse_value(key, v)?,
            "first_grid" => self.first_grid = parse_value(key, v)?,
            "detection_radius" => self.detection_radius = parse_value(key, v)?,
            "tau1" => self.tau1 = parse_value(key, v)?,
            "tau2" => self.tau2 = parse_value(key, v)?,
            "gt_corr_radius" => self.gt_corr_radius = parse_value(key, v)?,
            "ransac_iters" => self.ransac_iters = parse_value(key, v)?,
            "ransac_threshold" => self.ransac_threshold = parse_value(key, v)?,
            "ransac_adaptive" => self.ransac_adaptive = parse_value(key, v)?,
            "rmse_threshold" => self.rmse_threshold = parse_value(key, v)?,
            "rte_max" => self.rte_max = parse_value(key, v)?,
            "rre_max" => self.rre_max = parse_value(key, v)?,
            "repeatability_threshold" => self.repeatability_threshold = parse_value(key, v)?,
            "num_keypoints" => self.num_keypoints = parse_value(key, v)?,
            "keypoint_sweep" => self.keypoint_sweep = parse_list(key, v)?,
            "repeatability_counts" => self.repeatability_counts = parse_list(key, v)?,
            "saliency" => {
                self.saliency = match v {
                    "density" => SaliencyKind::DensityInvariant,
                    "softmax" => SaliencyKind::LocalSoftmax,
                    _ => return Err(format!("unknown saliency '{v}'")),
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            "pair_list" => self.pair_list = Some(PathBuf::from(v)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("first_grid", self.first_grid),
            ("detection_radius", self.detection_radius),
            ("tau1", self.tau1),
            ("gt_corr_radius", self.gt_corr_radius),
            ("ransac_threshold", self.ransac_threshold),
            ("rmse_threshold", self.rmse_threshold),
            ("rte_max", self.rte_max),
            ("rre_max", self.rre_max),
            ("repeatability_threshold", self.repeatability_threshold),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("{k} must be positive, got {v}"));
        }
        if !(0.0..=1.0).contains(&self.tau2) {
            return Err(format!("tau2 {} outside [0, 1]", self.tau2));
        }
        if self.ransac_iters == 0 || self.num_keypoints == 0 {
            return Err("ransac_iters and num_keypoints must be positive".into());
        }
        if self.keypoint_sweep.contains(&0) || self.repeatability_counts.contains(&0) {
            return Err("keypoint counts must be positive".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let entries: Vec<(usize, &str, &str)> = text
            .lines()
            .enumerate()
            .filter_map(|(k, l)| {
                let l = l.split('#').next().unwrap_or("").trim();
                (!l.is_empty()).then_some((k + 1, l))
            })
            .map(|(n, l)| {
                l.split_once('=')
                    .map(|(a, b)| (n, a.trim(), b.trim()))
                    .ok_or_else(|| parse_err(n, "expected key = value"))
            })
            .collect::<Result<_, _>>()?;
        let profile = match entries.iter().find(|(_, k, _)| *k == "profile") {
            Some((n, _, v)) => v.parse().map_err(|e: String| parse_err(*n, e))?,
            None => Profile::Indoor,
        };
        let mut cfg = Self::for_profile(profile);
        for (n, k, v) in entries {
            cfg.set(k, v).map_err(|e| parse_err(n, e))?;
        }
        cfg.validate().map_err(|e| parse_err(0, e))?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, IoError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its current value; [`DatasetConfig::parse`] reads it back.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "profile = {}", self.profile.name());
        let _ = writeln!(s, "voxel_size = {}", self.voxel_size);
        let _ = writeln!(s, "first_grid = {}", self.first_grid);
        let _ = writeln!(s, "detection_radius = {}", self.detection_radius);
        let _ = writeln!(s, "tau1 = {}", self.tau1);
        let _ = writeln!(s, "tau2 = {}", self.tau2);
        let _ = writeln!(s, "gt_corr_radius = {}", self.gt_corr_radius);
        let _ = writeln!(s, "ransac_iters = {}", self.ransac_iters);
        let _ = writeln!(s, "ransac_threshold = {}", self.ransac_threshold);
        let _ = writeln!(s, "ransac_adaptive = {}", self.ransac_adaptive);
        let _ = writeln!(s, "rmse_threshold = {}", self.rmse_threshold);
        let _ = writeln!(s, "rte_max = {}", self.rte_max);
        let _ = writeln!(s, "rre_max = {}", self.rre_max);
        let _ = writeln!(s, "repeatability_threshold = {}", self.repeatability_threshold);
        let _ = writeln!(s, "num_keypoints = {}", self.num_keypoints);
        let _ = writeln!(s, "keypoint_sweep = {}", join(&self.keypoint_sweep));
        let _ = writeln!(s, "repeatability_counts = {}", join(&self.repeatability_counts));
        let sal = match self.saliency {
            SaliencyKind::DensityInvariant => "density",
            SaliencyKind::LocalSoftmax => "softmax",
        };
        let _ = writeln!(s, "saliency = {sal}");
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(p) = &self.pair_list {
            let _ = writeln!(s, "pair_list = {}", p.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let i = DatasetConfig::indoor();
        assert_eq!((i.voxel_size, i.tau1, i.tau2, i.ransac_iters, i.repeatability_threshold), (0.03, 0.10, 0.05, 50_000, 0.1));
        let o = DatasetConfig::outdoor();
        assert_eq!((o.voxel_size, o.rte_max, o.rre_max, o.repeatability_threshold), (0.30, 2.0, 5.0, 0.5));
        assert_eq!(i.keypoint_sweep, vec![5000, 2500, 1000, 500, 250]);
        assert_eq!(i.repeatability_counts, vec![4, 8, 16, 32, 64, 128, 256, 512]);
    }

    #[test]
    fn parse_overrides_on_profile() {
        let text = "# outdoor run\nseed = 7\nprofile = outdoor\ntau2 = 0.2  # looser\nkeypoint_sweep = 100, 50\nsaliency = softmax\n";
        let c = DatasetConfig::parse(text).unwrap();
        assert_eq!(c.profile, Profile::Outdoor);
        assert_eq!(c.voxel_size, 0.30);
        assert_eq!(c.tau2, 0.2);
        assert_eq!(c.seed, 7);
        assert_eq!(c.keypoint_sweep, vec![100, 50]);
        assert_eq!(c.saliency, SaliencyKind::LocalSoftmax);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(DatasetConfig::parse("tau1 = 0.1\nbogus = 3\n"), Err(IoError::Parse { line: 2, .. })));
        assert!(matches!(DatasetConfig::parse("tau1 0.1\n"), Err(IoError::Parse { line: 1, .. })));
        assert!(matches!(DatasetConfig::parse("tau1 = abc\n"), Err(IoError::Parse { line: 1, .. })));
        assert!(DatasetConfig::parse("tau1 = -1\n").is_err());
        assert!(DatasetConfig::parse("profile = attic\n").is_err());
    }

    #[test]
    fn string_round_trip() {
        let mut c = DatasetConfig::outdoor();
        c.seed = 99;
        c.pair_list = Some(PathBuf::from("pairs.txt"));
        c.detection_radius = 0.123456789;
        assert_eq!(DatasetConfig::parse(&c.to_config_string()).unwrap(), c);
    }
}

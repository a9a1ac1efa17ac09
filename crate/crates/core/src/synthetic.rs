//! Seeded synthetic scenes and fragment pairs with known relative poses.
//!
//! A scene is a corner of a room (floor and two walls) with boxes and spheres
//! on the floor, sampled on a jittered grid. Fragment pairs are crops of the
//! scene along `x`; the second fragment is expressed in its own frame so that
//! the ground-truth transform maps it back onto the first.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::io::{write_manifest, write_ply, IoError, ManifestPair, PairManifest, PlyEncoding, PlyPrecision};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Side of the floor square (m).
    pub extent: f64,
    /// Sampling step (m).
    pub spacing: f64,
    pub objects: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: 1.2,
            spacing: 0.02,
            objects: 6,
            seed: 0,
        }
    }
}

/// Jittered grid samples of the parallelogram `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
fn sample_patch(out: &mut Vec<Point>, rng: &mut ChaCha8Rng, origin: Point, u: Vector3<f64>, v: Vector3<f64>, step: f64) {
    let nu = (u.norm() / step).ceil().max(1.0) as usize;
    let nv = (v.norm() / step).ceil().max(1.0) as usize;
    for a in 0..nu {
        for b in 0..nv {
            let s = (a as f64 + rng.random_range(0.2..0.8)) / nu as f64;
            let t = (b as f64 + rng.random_range(0.2..0.8)) / nv as f64;
            out.push(origin + u * s + v * t);
        }
    }
}

fn sample_box(out: &mut Vec<Point>, rng: &mut ChaCha8Rng, lo: Point, size: Vector3<f64>, step: f64) {
    let (x, y, z) = (Vector3::x() * size.x, Vector3::y() * size.y, Vector3::z() * size.z);
    // The bottom face rests on the floor and is not visible.
    sample_patch(out, rng, lo + z, x, y, step);
    sample_patch(out, rng, lo, x, z, step);
    sample_patch(out, rng, lo + y, x, z, step);
    sample_patch(out, rng, lo, y, z, step);
    sample_patch(out, rng, lo + x, y, z, step);
}

fn sample_sphere(out: &mut Vec<Point>, center: Point, r: f64, step: f64) {
    let n = ((4.0 * PI * r * r) / (step * step)).ceil() as usize;
    let golden = PI * (3.0 - 5f64.sqrt());
    for k in 0..n {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
        let rad = (1.0 - z * z).sqrt();
        let phi = golden * k as f64;
        let p = center + Vector3::new(rad * phi.cos(), rad * phi.sin(), z) * r;
        if p.z >= 0.0 {
            out.push(p);
        }
    }
}

pub fn synthetic_scene(params: &SceneParams) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (e, h, step) = (params.extent, params.extent / 2.0, params.spacing);
    let mut pts = Vec::new();
    sample_patch(&mut pts, &mut rng, Point::zeros(), Vector3::x() * e, Vector3::y() * e, step);
    sample_patch(&mut pts, &mut rng, Point::zeros(), Vector3::y() * e, Vector3::z() * h, step);
    sample_patch(&mut pts, &mut rng, Point::zeros(), Vector3::x() * e, Vector3::z() * h, step);
    for k in 0..params.objects {
        let c = Point::new(rng.random_range(0.15..0.85) * e, rng.random_range(0.15..0.85) * e, 0.0);
        if k % 2 == 0 {
            let size = Vector3::new(
                rng.random_range(0.08..0.25) * e,
                rng.random_range(0.08..0.25) * e,
                rng.random_range(0.05..0.3) * e,
            );
            sample_box(&mut pts, &mut rng, c - Vector3::new(size.x, size.y, 0.0) / 2.0, size, step);
        } else {
            let r = rng.random_range(0.04..0.12) * e;
            sample_sphere(&mut pts, c + Vector3::z() * r * 0.6, r, step);
        }
    }
    PointCloud::new(pts).expect("finite samples")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairParams {
    /// Fraction of the extent along `x` kept by each fragment; values above
    /// 0.5 make the fragments overlap, 1 keeps the whole scene in both.
    pub crop: f64,
    /// Largest rotation angle of the relative pose (degrees).
    pub max_rotation_deg: f64,
    /// Largest translation component of the relative pose (m).
    pub max_translation: f64,
    /// Round translation components to multiples of this step.
    pub lattice: Option<f64>,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            crop: 0.75,
            max_rotation_deg: 30.0,
            max_translation: 1.0,
            lattice: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentPair {
    pub a: PointCloud,
    pub b: PointCloud,
    /// Maps `b` into the frame of `a`.
    pub t_gt: RigidTransform,
    /// Fraction of `b`'s points that are also in `a`.
    pub overlap: f64,
}

pub fn random_pose(rng: &mut impl Rng, max_rotation_deg: f64, max_translation: f64, lattice: Option<f64>) -> RigidTransform {
    let axis = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n: f64 = v.norm();
        if n > 0.1 && n <= 1.0 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..=max_rotation_deg).to_radians();
    let mut t = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
        * max_translation;
    if let Some(step) = lattice {
        t = t.map(|c| (c / step).round() * step);
    }
    RigidTransform::from_axis_angle(&axis, angle, t)
}

pub fn fragment_pair(scene: &PointCloud, params: &PairParams, seed: u64) -> FragmentPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = scene.points();
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let span = hi - lo;
    let in_a = |p: &Point| p.x <= lo + params.crop * span;
    let in_b = |p: &Point| p.x >= hi - params.crop * span;
    let t_gt = random_pose(&mut rng, params.max_rotation_deg, params.max_translation, params.lattice);
    let inv = t_gt.inverse();
    let a: Vec<Point> = pts.iter().filter(|p| in_a(p)).copied().collect();
    let b: Vec<Point> = pts.iter().filter(|p| in_b(p)).map(|p| inv.apply(p)).collect();
    let shared = pts.iter().filter(|p| in_a(p) && in_b(p)).count();
    let overlap = shared as f64 / b.len() as f64;
    FragmentPair {
        a: PointCloud::new(a).expect("non-empty crop"),
        b: PointCloud::new(b).expect("non-empty crop"),
        t_gt,
        overlap,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub scenes: usize,
    pub pairs_per_scene: usize,
    pub scene: SceneParams,
    pub pair: PairParams,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            scenes: 2,
            pairs_per_scene: 5,
            scene: SceneParams::default(),
            pair: PairParams::default(),
            seed: 0,
        }
    }
}

/// Writes fragment PLYs and a `pairs.txt` manifest into `dir`.
pub fn write_synthetic_dataset(dir: &Path, params: &DatasetParams) -> Result<PairManifest, IoError> {
    fs::create_dir_all(dir)?;
    let mut manifest = PairManifest::default();
    for s in 0..params.scenes {
        let scene_name = format!("scene{s}");
        let scene = synthetic_scene(&SceneParams {
            seed: params.seed.wrapping_mul(1000).wrapping_add(s as u64),
            ..params.scene.clone()
        });
        for k in 0..params.pairs_per_scene {
            let pair = fragment_pair(&scene, &params.pair, params.seed ^ ((s as u64) << 32 | k as u64));
            let a = dir.join(format!("{scene_name}_{k}_a.ply"));
            let b = dir.join(format!("{scene_name}_{k}_b.ply"));
            write_ply(&a, &pair.a, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double)?;
            write_ply(&b, &pair.b, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double)?;
            manifest.pairs.push(ManifestPair {
                scene: scene_name.clone(),
                fragment_a: a,
                fragment_b: b,
                overlap: pair.overlap,
                transform: pair.t_gt,
            });
        }
    }
    write_manifest(dir.join("pairs.txt"), &manifest, dir)?;
    Ok(manifest)
}

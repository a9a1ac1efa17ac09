use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kpfeat::detector::{score_map, select_keypoints};
use kpfeat::geometry::{compose, PointCloud, RigidTransform};
use kpfeat::io::{
    correspondences_csv, keypoints_csv, read_features, read_manifest, read_ply, report_csv,
    report_table, write_features, write_manifest, write_ply, write_pose_file, DatasetConfig,
    ManifestPair, PairManifest, PlyEncoding, PlyPrecision, PoseEntry, Profile,
};
use kpfeat::kpconv::{load_weights, network_forward, save_weights, KpConvModel, ModelConfig};
use kpfeat::neighborhood::{build_index, radius_neighbors, random_rotation_perturb, voxel_downsample};
use kpfeat::pipeline::{run_pipeline_files, Mode};
use kpfeat::registration::{icp_refine, mutual_nn_matches, ransac_register, IcpParams, RansacParams};
use kpfeat::synthetic::{write_synthetic_dataset, DatasetParams, PairParams, SceneParams};

#[derive(Parser)]
#[command(name = "kpfeat", version, about = "Dense 3D keypoint detection and description")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-point responses and descriptors of a cloud.
    Describe(DescribeArgs),
    /// Score points and write the top keypoints.
    Detect(DetectArgs),
    /// Mutual nearest neighbor matching of two feature files.
    Match(MatchArgs),
    /// Estimate the transform taking cloud B onto cloud A.
    Register(RegisterArgs),
    /// Run the benchmark over a pair manifest.
    Evaluate(EvaluateArgs),
    /// Randomly rotate every fragment of a manifest.
    Perturb(PerturbArgs),
    /// Write a randomly initialized model.
    InitModel(InitModelArgs),
    /// Generate a synthetic dataset with ground-truth poses.
    Synth(SynthArgs),
}

/// Dataset configuration: profile defaults, then the config file, then `--set`.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value = "indoor")]
    profile: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set tau1=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<DatasetConfig> {
        let mut cfg = match &self.config {
            Some(path) => DatasetConfig::read(path).with_context(|| format!("reading {}", path.display()))?,
            None => {
                let p: Profile = self.profile.parse().map_err(anyhow::Error::msg)?;
                DatasetConfig::for_profile(p)
            }
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{o}'");
            };
            cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
        }
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DescribeArgs {
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Feature binary to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the downsampled cloud the features belong to.
    #[arg(long)]
    cloud_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DetectArgs {
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_keypoints: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MatchArgs {
    features_a: PathBuf,
    features_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keypoint CSV restricting side A.
    #[arg(long)]
    keypoints_a: Option<PathBuf>,
    #[arg(long)]
    keypoints_b: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Clouds the features were computed on (see `describe --cloud-out`).
    cloud_a: PathBuf,
    cloud_b: PathBuf,
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    /// Pose file receiving the estimated transform.
    #[arg(long)]
    out: PathBuf,
    /// CSV receiving the RANSAC inliers.
    #[arg(long)]
    inliers_out: Option<PathBuf>,
    /// Refine with point-to-point ICP.
    #[arg(long)]
    icp: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Pair manifest (defaults to the config's `pair_list`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "pred")]
    mode: String,
    /// Evaluate a single keypoint count instead of the sweep.
    #[arg(long)]
    num_keypoints: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PerturbArgs {
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitModelArgs {
    #[arg(long)]
    out: PathBuf,
    /// First subsampling grid (m); later stages double it.
    #[arg(long, default_value_t = 0.03)]
    first_grid: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    scenes: usize,
    #[arg(long, default_value_t = 5)]
    pairs_per_scene: usize,
    #[arg(long, default_value_t = 1.2)]
    extent: f64,
    #[arg(long, default_value_t = 0.02)]
    spacing: f64,
    #[arg(long, default_value_t = 0.75)]
    crop: f64,
    #[arg(long, default_value_t = 30.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 1.0)]
    max_translation: f64,
    /// Round translations to multiples of this step.
    #[arg(long)]
    lattice: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_ply(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<KpConvModel> {
    load_weights(path).with_context(|| format!("loading model {}", path.display()))
}

/// Indices from the first column of a keypoint CSV.
fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let first = l.split(',').next().unwrap_or("");
            first.trim().parse().with_context(|| format!("bad index '{first}' in {}", path.display()))
        })
        .collect()
}

fn describe(a: DescribeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let model = load_model(&a.model)?;
    let cloud = voxel_downsample(&load_cloud(&a.input)?, cfg.voxel_size)?;
    let features = network_forward(&model, &cloud)?;
    write_features(&a.out, &features)?;
    if let Some(p) = &a.cloud_out {
        write_ply(p, &cloud, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double)?;
    }
    println!("{} points, {} channels", features.len(), features.channels());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let model = load_model(&a.model)?;
    let cloud = voxel_downsample(&load_cloud(&a.input)?, cfg.voxel_size)?;
    let features = network_forward(&model, &cloud)?;
    let lists = radius_neighbors(&build_index(&cloud), cloud.points(), cfg.detection_radius)?;
    let scores = score_map(&features.responses, &lists, cfg.saliency)?;
    let k = a.num_keypoints.unwrap_or(cfg.num_keypoints).min(cloud.len());
    let kp = select_keypoints(&scores.scores, k)?;
    fs::write(&a.out, keypoints_csv(&cloud, &kp.indices, &kp.scores)?)?;
    println!("{} keypoints of {} points", kp.len(), cloud.len());
    Ok(())
}

fn match_features(a: MatchArgs) -> Result<()> {
    let fa = read_features(&a.features_a)?;
    let fb = read_features(&a.features_b)?;
    let sel = |path: &Option<PathBuf>, n: usize| -> Result<Vec<usize>> {
        match path {
            Some(p) => read_indices(p),
            None => Ok((0..n).collect()),
        }
    };
    let sa = sel(&a.keypoints_a, fa.len())?;
    let sb = sel(&a.keypoints_b, fb.len())?;
    let m = mutual_nn_matches(&fa, &fb, &sa, &sb)?;
    fs::write(&a.out, correspondences_csv(&m)?)?;
    println!("{} mutual matches", m.len());
    Ok(())
}

fn register(a: RegisterArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let (ca, cb) = (load_cloud(&a.cloud_a)?, load_cloud(&a.cloud_b)?);
    let (fa, fb) = (read_features(&a.features_a)?, read_features(&a.features_b)?);
    if fa.len() != ca.len() || fb.len() != cb.len() {
        bail!("feature rows do not match cloud sizes ({} vs {}, {} vs {})", fa.len(), ca.len(), fb.len(), cb.len());
    }
    let all_a: Vec<usize> = (0..fa.len()).collect();
    let all_b: Vec<usize> = (0..fb.len()).collect();
    let matches = mutual_nn_matches(&fa, &fb, &all_a, &all_b)?;
    let params = RansacParams {
        max_iters: cfg.ransac_iters,
        inlier_threshold: cfg.ransac_threshold,
        seed: cfg.seed,
        adaptive: cfg.ransac_adaptive,
        ..Default::default()
    };
    let result = ransac_register(&ca, &cb, &matches, &params)?;
    let mut transform = result.transform;
    if a.icp {
        let icp = IcpParams {
            max_distance: Some(cfg.ransac_threshold),
            ..Default::default()
        };
        transform = icp_refine(&ca, &cb, &transform, &icp)?.transform;
    }
    let ids = vec![a.cloud_a.display().to_string(), a.cloud_b.display().to_string()];
    write_pose_file(&a.out, &[PoseEntry { ids, transform }])?;
    if let Some(p) = &a.inliers_out {
        fs::write(p, correspondences_csv(&result.inliers)?)?;
    }
    println!(
        "{} matches, {} inliers after {} hypotheses",
        matches.len(),
        result.inliers.len(),
        result.iterations_used
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(k) = a.num_keypoints {
        cfg.keypoint_sweep = vec![k];
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = a
        .manifest
        .or_else(|| cfg.pair_list.clone())
        .context("no manifest given (use --manifest or pair_list in the config)")?;
    let mode: Mode = a.mode.parse().map_err(anyhow::Error::msg)?;
    let report = run_pipeline_files(&cfg, &manifest, &a.model, mode)?;
    fs::write(&a.out, report_csv(&report)?)?;
    print!("{}", report_table(&report));
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut out = PairManifest::default();
    let rotate = |path: &Path, salt: u64| -> Result<(PathBuf, RigidTransform)> {
        let cloud = load_cloud(path)?;
        let name = path.file_name().context("fragment without file name")?;
        let dest = a.out_dir.join(name);
        let (rotated, r) = random_rotation_perturb(&cloud, a.seed ^ salt);
        if !dest.exists() {
            write_ply(&dest, &rotated, PlyEncoding::BinaryLittleEndian, PlyPrecision::Double)?;
        }
        Ok((dest, r))
    };
    for (k, pair) in manifest.pairs.iter().enumerate() {
        // Each fragment gets one rotation, shared by every pair it appears in.
        let salt = |p: &Path| {
            p.to_string_lossy()
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
        };
        let (pa, ra) = rotate(&pair.fragment_a, salt(&pair.fragment_a))?;
        let (pb, rb) = rotate(&pair.fragment_b, salt(&pair.fragment_b))?;
        // a' = Ra a, b' = Rb b and a = T b give a' = Ra T Rb⁻¹ b'.
        let transform = compose(&ra, &compose(&pair.transform, &rb.inverse()));
        out.pairs.push(ManifestPair {
            scene: pair.scene.clone(),
            fragment_a: pa,
            fragment_b: pb,
            overlap: pair.overlap,
            transform,
        });
        log::debug!("pair {k} rotated");
    }
    write_manifest(a.out_dir.join("pairs.txt"), &out, &a.out_dir)?;
    println!("{} pairs written to {}", out.pairs.len(), a.out_dir.display());
    Ok(())
}

fn init_model(a: InitModelArgs) -> Result<()> {
    let model = KpConvModel::random(ModelConfig::new(a.first_grid), a.seed)?;
    save_weights(&model, &a.out)?;
    println!("{} parameters written to {}", model.parameter_count(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = DatasetParams {
        scenes: a.scenes,
        pairs_per_scene: a.pairs_per_scene,
        scene: SceneParams {
            extent: a.extent,
            spacing: a.spacing,
            ..Default::default()
        },
        pair: PairParams {
            crop: a.crop,
            max_rotation_deg: a.max_rotation,
            max_translation: a.max_translation,
            lattice: a.lattice,
        },
        seed: a.seed,
    };
    let m = write_synthetic_dataset(&a.out_dir, &params)?;
    println!("{} pairs written to {}", m.pairs.len(), a.out_dir.join("pairs.txt").display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Describe(a) => describe(a),
        Command::Detect(a) => detect(a),
        Command::Match(a) => match_features(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Perturb(a) => perturb(a),
        Command::InitModel(a) => init_model(a),
        Command::Synth(a) => synth(a),
    }
}

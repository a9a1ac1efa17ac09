//! Fully convolutional encoder/decoder built from kernel point convolutions.
//!
//! Encoder: a plain convolution lifts the constant input feature to 64
//! channels, then each of the five stages runs one bottleneck residual block
//! (stages 1..4 open with a strided block that pools onto the next, coarser
//! grid). Channel plan: 64, 128, 256, 512, 1024.
//!
//! Decoder: starting from the coarsest stage, features are copied to the finer
//! stage by nearest neighbor, concatenated with the encoder features of that
//! stage and mixed by a pointwise layer. A final pointwise head projects to 32
//! channels without normalization or rectifier.

use ndarray::{concatenate, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::kernel::{kernel_dispositions_with, DEFAULT_KERNEL_SIZE, DEFAULT_SIGMA_DIVISOR};
use super::layer::{Affine, ConvLayer, UnaryLayer};
use super::KpConvError;
use crate::geometry::{FeatureMap, Point, PointCloud};
use crate::neighborhood::{grid_subsample, lex_cmp, radius_neighbors, NeighborhoodIndex};

pub const ENCODER_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
pub const DESCRIPTOR_DIM: usize = 32;
pub const DEFAULT_RADIUS_FACTOR: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Grid size of the finest stage, meters. Stage `l` uses `first_grid·2^l`.
    pub first_grid: f64,
    /// Convolution radius as a multiple of the stage grid size.
    pub radius_factor: f64,
    /// Kernel influence length is `extent / sigma_divisor`, the extent being
    /// the convolution radius.
    pub sigma_divisor: f64,
    pub kernel_size: usize,
}

impl ModelConfig {
    pub fn new(first_grid: f64) -> Self {
        Self {
            first_grid,
            radius_factor: DEFAULT_RADIUS_FACTOR,
            sigma_divisor: DEFAULT_SIGMA_DIVISOR,
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }

    pub fn grid(&self, stage: usize) -> f64 {
        self.first_grid * (1u64 << stage) as f64
    }

    pub fn radius(&self, stage: usize) -> f64 {
        self.radius_factor * self.grid(stage)
    }

    fn validate(&self) -> Result<(), KpConvError> {
        for (name, v) in [
            ("first_grid", self.first_grid),
            ("radius_factor", self.radius_factor),
            ("sigma_divisor", self.sigma_divisor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(KpConvError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Bottleneck residual block: unary → conv → unary, plus a shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResnetBlock {
    pub unary_in: UnaryLayer,
    pub conv: ConvLayer,
    pub unary_out: UnaryLayer,
    /// Projection on the shortcut when the channel count changes.
    pub shortcut: Option<UnaryLayer>,
    /// Pools from the previous stage onto this block's stage.
    pub strided: bool,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpConvModel {
    pub config: ModelConfig,
    /// Lifts the constant input feature to the first channel count.
    pub input_conv: ConvLayer,
    /// Stage 0 block, then a strided and a plain block for each later stage.
    pub encoder: Vec<ResnetBlock>,
    /// One pointwise layer per decoder step, coarsest first.
    pub decoder: Vec<UnaryLayer>,
    pub head: UnaryLayer,
}

/// Shape of one primitive layer in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerSpec {
    Conv {
        d_in: usize,
        d_out: usize,
        stage: usize,
        relu: bool,
    },
    Unary {
        d_in: usize,
        d_out: usize,
        relu: bool,
    },
}

/// Primitive layers in the order they are stored on disk.
pub(crate) fn architecture() -> Vec<LayerSpec> {
    let c = ENCODER_CHANNELS;
    let mut specs = vec![LayerSpec::Conv {
        d_in: 1,
        d_out: c[0],
        stage: 0,
        relu: true,
    }];
    let block = |specs: &mut Vec<LayerSpec>, d_in: usize, d_out: usize, conv_stage: usize| {
        let mid = d_out / 4;
        specs.push(LayerSpec::Unary {
            d_in,
            d_out: mid,
            relu: true,
        });
        specs.push(LayerSpec::Conv {
            d_in: mid,
            d_out: mid,
            stage: conv_stage,
            relu: true,
        });
        specs.push(LayerSpec::Unary {
            d_in: mid,
            d_out,
            relu: false,
        });
        if d_in != d_out {
            specs.push(LayerSpec::Unary {
                d_in,
                d_out,
                relu: false,
            });
        }
    };
    block(&mut specs, c[0], c[0], 0);
    for stage in 1..c.len() {
        // Strided convolutions gather at the previous stage's radius.
        block(&mut specs, c[stage - 1], c[stage], stage - 1);
        block(&mut specs, c[stage], c[stage], stage);
    }
    let mut deep = c[c.len() - 1];
    for stage in (0..c.len() - 1).rev() {
        specs.push(LayerSpec::Unary {
            d_in: deep + c[stage],
            d_out: c[stage],
            relu: true,
        });
        deep = c[stage];
    }
    specs.push(LayerSpec::Unary {
        d_in: c[0],
        d_out: DESCRIPTOR_DIM,
        relu: false,
    });
    specs
}

/// Flat list of parameters for one primitive layer.
#[derive(Debug, Clone)]
pub(crate) enum LayerParams {
    Conv(ConvLayer),
    Unary(UnaryLayer),
}

type LayerIter = std::vec::IntoIter<LayerParams>;

fn take_conv(it: &mut LayerIter) -> ConvLayer {
    match it.next() {
        Some(LayerParams::Conv(c)) => c,
        _ => unreachable!("checked against architecture"),
    }
}

fn take_unary(it: &mut LayerIter) -> UnaryLayer {
    match it.next() {
        Some(LayerParams::Unary(u)) => u,
        _ => unreachable!("checked against architecture"),
    }
}

impl KpConvModel {
    /// Seeded random initialization (He-style normal weights, folded batch
    /// norm near identity). All values are exactly representable as `f32`, so
    /// a save/load cycle reproduces the model bit for bit.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, KpConvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale_dist = Uniform::new(0.8f32, 1.2).expect("valid range");
        let shift_dist = Normal::new(0.0f32, 0.05).expect("valid sigma");
        let mut layers = Vec::new();
        let specs = architecture();
        let last = specs.len() - 1;
        for (i, spec) in specs.into_iter().enumerate() {
            let is_head = i == last;
            let (d_in, d_out, relu) = match spec {
                LayerSpec::Conv { d_in, d_out, relu, .. } => (d_in, d_out, relu),
                LayerSpec::Unary { d_in, d_out, relu } => (d_in, d_out, relu),
            };
            let std = (2.0 / d_in as f32).sqrt();
            let w_dist = Normal::new(0.0f32, std).expect("valid sigma");
            let affine = if is_head {
                Affine {
                    scale: vec![1.0; d_out],
                    shift: (0..d_out).map(|_| shift_dist.sample(&mut rng) as f64).collect(),
                }
            } else {
                Affine {
                    scale: (0..d_out).map(|_| scale_dist.sample(&mut rng) as f64).collect(),
                    shift: (0..d_out).map(|_| shift_dist.sample(&mut rng) as f64).collect(),
                }
            };
            let params = match spec {
                LayerSpec::Conv { stage, .. } => {
                    let k = config.kernel_size;
                    let w = Array3::from_shape_simple_fn((k, d_in, d_out), || {
                        w_dist.sample(&mut rng) as f64
                    });
                    LayerParams::Conv(Self::conv_layer(&config, stage, w, affine, relu)?)
                }
                LayerSpec::Unary { .. } => {
                    let w = Array2::from_shape_simple_fn((d_in, d_out), || {
                        w_dist.sample(&mut rng) as f64
                    });
                    LayerParams::Unary(UnaryLayer::new(w, affine, relu)?)
                }
            };
            layers.push(params);
        }
        Self::assemble(config, layers)
    }

    pub(crate) fn conv_layer(
        config: &ModelConfig,
        stage: usize,
        weights: Array3<f64>,
        affine: Affine,
        relu: bool,
    ) -> Result<ConvLayer, KpConvError> {
        let radius = config.radius(stage);
        let kernel = kernel_dispositions_with(config.kernel_size, radius, config.sigma_divisor)?;
        ConvLayer::new(weights, radius, kernel, affine, relu)
    }

    /// Arranges primitive layers (in [`architecture`] order) into the model,
    /// checking every shape against the channel plan.
    pub(crate) fn assemble(config: ModelConfig, layers: Vec<LayerParams>) -> Result<Self, KpConvError> {
        config.validate()?;
        let specs = architecture();
        if layers.len() != specs.len() {
            return Err(KpConvError::Shape(format!(
                "model has {} layers, architecture needs {}",
                layers.len(),
                specs.len()
            )));
        }
        for (i, (spec, layer)) in specs.iter().zip(&layers).enumerate() {
            let ok = match (spec, layer) {
                (LayerSpec::Conv { d_in, d_out, relu, .. }, LayerParams::Conv(c)) => {
                    c.d_in() == *d_in
                        && c.d_out() == *d_out
                        && c.relu == *relu
                        && c.kernel.len() == config.kernel_size
                }
                (LayerSpec::Unary { d_in, d_out, relu }, LayerParams::Unary(u)) => {
                    u.d_in() == *d_in && u.d_out() == *d_out && u.relu == *relu
                }
                _ => false,
            };
            if !ok {
                return Err(KpConvError::Shape(format!(
                    "layer {i} does not match expected {spec:?}"
                )));
            }
        }

        let mut it = layers.into_iter();
        let input_conv = take_conv(&mut it);
        let c = ENCODER_CHANNELS;
        let mut encoder = Vec::new();
        let mut push_block = |it: &mut LayerIter, d_in: usize, d_out: usize, stage: usize, strided: bool| {
            encoder.push(ResnetBlock {
                unary_in: take_unary(it),
                conv: take_conv(it),
                unary_out: take_unary(it),
                shortcut: (d_in != d_out).then(|| take_unary(it)),
                strided,
                stage,
            });
        };
        push_block(&mut it, c[0], c[0], 0, false);
        for stage in 1..c.len() {
            push_block(&mut it, c[stage - 1], c[stage], stage, true);
            push_block(&mut it, c[stage], c[stage], stage, false);
        }
        let mut decoder = Vec::new();
        for _ in 0..c.len() - 1 {
            decoder.push(take_unary(&mut it));
        }
        let head = take_unary(&mut it);
        debug_assert!(it.next().is_none());
        Ok(Self {
            config,
            input_conv,
            encoder,
            decoder,
            head,
        })
    }

    /// Primitive layers in serialization order.
    pub(crate) fn layers(&self) -> Vec<LayerParams> {
        let mut out = vec![LayerParams::Conv(self.input_conv.clone())];
        for b in &self.encoder {
            out.push(LayerParams::Unary(b.unary_in.clone()));
            out.push(LayerParams::Conv(b.conv.clone()));
            out.push(LayerParams::Unary(b.unary_out.clone()));
            if let Some(s) = &b.shortcut {
                out.push(LayerParams::Unary(s.clone()));
            }
        }
        out.extend(self.decoder.iter().cloned().map(LayerParams::Unary));
        out.push(LayerParams::Unary(self.head.clone()));
        out
    }

    pub fn num_stages(&self) -> usize {
        ENCODER_CHANNELS.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| match l {
                LayerParams::Conv(c) => c.weights.len() + 2 * c.d_out(),
                LayerParams::Unary(u) => u.weights.len() + 2 * u.d_out(),
            })
            .sum()
    }
}

/// Points and neighborhoods of every stage for one input cloud.
struct Pyramid {
    points: Vec<Vec<Point>>,
    /// Same-stage convolution neighborhoods.
    conv: Vec<Vec<Vec<usize>>>,
    /// `pool[l]`: neighbors of stage-`l` points among stage `l-1` (empty for 0).
    pool: Vec<Vec<Vec<usize>>>,
    /// `up[l]`: nearest stage-`l+1` point of every stage-`l` point.
    up: Vec<Vec<usize>>,
}

fn bbox_min(points: &[Point]) -> Point {
    points.iter().fold(points[0], |m, p| m.inf(p))
}

/// Radius neighborhoods with each list ordered by support coordinates, so the
/// floating point accumulation order does not depend on input point order.
fn canonical_neighbors(
    queries: &[Point],
    supports: &[Point],
    r: f64,
) -> Result<Vec<Vec<usize>>, KpConvError> {
    let index = NeighborhoodIndex::new(supports.to_vec())?;
    let mut lists = radius_neighbors(&index, queries, r)?.into_inner();
    lists.par_iter_mut().for_each(|l| {
        l.sort_by(|&a, &b| lex_cmp(&supports[a], &supports[b]).then(a.cmp(&b)))
    });
    Ok(lists)
}

impl Pyramid {
    fn build(config: &ModelConfig, input: &[Point], stages: usize) -> Result<Self, KpConvError> {
        let mut points = vec![input.to_vec()];
        for l in 1..stages {
            let prev = &points[l - 1];
            let next = grid_subsample(prev, config.grid(l), &bbox_min(prev));
            points.push(next);
        }
        let mut conv = Vec::with_capacity(stages);
        let mut pool = vec![Vec::new()];
        let mut up = Vec::with_capacity(stages - 1);
        for l in 0..stages {
            conv.push(canonical_neighbors(&points[l], &points[l], config.radius(l))?);
            if l > 0 {
                pool.push(canonical_neighbors(
                    &points[l],
                    &points[l - 1],
                    config.radius(l - 1),
                )?);
            }
            if l + 1 < stages {
                let coarse = NeighborhoodIndex::new(points[l + 1].clone())?;
                up.push(points[l].par_iter().map(|p| coarse.nearest(p).0).collect());
            }
        }
        Ok(Self {
            points,
            conv,
            pool,
            up,
        })
    }
}

fn max_pool(features: &Array2<f64>, lists: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((lists.len(), features.ncols()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(lists.par_iter())
        .for_each(|(mut row, list)| {
            if list.is_empty() {
                return;
            }
            row.fill(f64::NEG_INFINITY);
            for &j in list {
                for (o, &v) in row.iter_mut().zip(features.row(j)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        });
    out
}

impl ResnetBlock {
    fn forward(&self, pyr: &Pyramid, x: &Array2<f64>) -> Array2<f64> {
        let target = self.stage;
        let source = if self.strided { target - 1 } else { target };
        let lists = if self.strided {
            &pyr.pool[target]
        } else {
            &pyr.conv[target]
        };
        let h = self.unary_in.forward(x);
        let h = self
            .conv
            .forward_lists(&pyr.points[target], &pyr.points[source], lists, &h);
        let mut h = self.unary_out.forward(&h);
        let pooled;
        let shortcut_in = if self.strided {
            pooled = max_pool(x, lists);
            &pooled
        } else {
            x
        };
        let shortcut = match &self.shortcut {
            Some(u) => u.forward(shortcut_in),
            None => shortcut_in.clone(),
        };
        h += &shortcut;
        h.mapv_inplace(|v| v.max(0.0));
        h
    }
}

/// Dense descriptors for every point of `cloud`.
///
/// The head output is L2-normalized row-wise into the descriptors; its
/// rectified copy is returned as the response map used for scoring. Only
/// relative coordinates enter the computation, so the result is invariant to
/// translating the cloud, and permuting the input permutes the rows.
pub fn network_forward(model: &KpConvModel, cloud: &PointCloud) -> Result<FeatureMap, KpConvError> {
    if model.input_conv.d_in() != 1 {
        return Err(KpConvError::Shape(format!(
            "input convolution expects {} channels, clouds provide 1",
            model.input_conv.d_in()
        )));
    }
    let stages = model.num_stages();
    let pyr = Pyramid::build(&model.config, cloud.points(), stages)?;
    let ones = Array2::ones((cloud.len(), 1));
    let mut x = model
        .input_conv
        .forward_lists(&pyr.points[0], &pyr.points[0], &pyr.conv[0], &ones);
    let mut skips: Vec<Array2<f64>> = Vec::with_capacity(stages);
    for block in &model.encoder {
        if block.strided {
            skips.push(x.clone());
        }
        x = block.forward(&pyr, &x);
    }
    for (step, unary) in model.decoder.iter().enumerate() {
        let stage = stages - 2 - step;
        let upsampled = x.select(Axis(0), &pyr.up[stage]);
        let skip = &skips[stage];
        let cat = concatenate(Axis(1), &[upsampled.view(), skip.view()])
            .expect("matching row counts");
        x = unary.forward(&cat);
    }
    let raw = model.head.forward(&x);
    Ok(FeatureMap::from_head_output(&raw))
}

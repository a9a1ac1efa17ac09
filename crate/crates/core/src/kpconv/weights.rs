//! Binary weight file.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "KP3FEAT\0"
//! version      u32      1
//! first_grid   f64      meters
//! radius_f     f64      convolution radius / grid size
//! sigma_div    f64      kernel extent / sigma
//! kernel_size  u32
//! n_stages     u32      followed by n_stages × u32 encoder channels
//! out_dim      u32
//! n_layers     u32
//! per layer:
//!   tag        u32      1 = kernel point convolution, 2 = pointwise
//!   flags      u32      bit 0: rectifier
//!   k          u32      kernel points (1 for pointwise)
//!   d_in       u32
//!   d_out      u32
//!   weights    f32 × k·d_in·d_out, row-major [k][d_in][d_out]
//!   scale      f32 × d_out
//!   shift      f32 × d_out
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use thiserror::Error;

use super::layer::{Affine, UnaryLayer};
use super::model::{architecture, KpConvModel, LayerParams, LayerSpec, ModelConfig};
use super::model::{DESCRIPTOR_DIM, ENCODER_CHANNELS};
use super::KpConvError;

pub const MAGIC: &[u8; 8] = b"KP3FEAT\0";
pub const VERSION: u32 = 1;

const TAG_CONV: u32 = 1;
const TAG_UNARY: u32 = 2;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("weight file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("weight file is truncated")]
    Truncated,
    #[error("{0} unexpected bytes after the last layer")]
    TrailingBytes(usize),
    #[error("unknown layer tag {0}")]
    UnknownLayerTag(u32),
    #[error("shape inconsistency: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] KpConvError),
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| WeightsError::Truncated)
    }

    fn f64(&mut self) -> Result<f64, WeightsError> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| WeightsError::Truncated)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, WeightsError> {
        if n.checked_mul(4).is_none_or(|b| b > self.remaining()) {
            return Err(WeightsError::Truncated);
        }
        let mut buf = vec![0f32; n];
        self.cur
            .read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|_| WeightsError::Truncated)?;
        Ok(buf.into_iter().map(f64::from).collect())
    }
}

fn write_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.write_f32::<LittleEndian>(v as f32).expect("vec write");
    }
}

/// Serializes the model. Parameters are stored as `f32`.
pub fn model_to_bytes(model: &KpConvModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let w = |v: u32, out: &mut Vec<u8>| out.write_u32::<LittleEndian>(v).expect("vec write");
    w(VERSION, &mut out);
    let c = &model.config;
    for v in [c.first_grid, c.radius_factor, c.sigma_divisor] {
        out.write_f64::<LittleEndian>(v).expect("vec write");
    }
    w(c.kernel_size as u32, &mut out);
    w(ENCODER_CHANNELS.len() as u32, &mut out);
    for ch in ENCODER_CHANNELS {
        w(ch as u32, &mut out);
    }
    w(DESCRIPTOR_DIM as u32, &mut out);
    let layers = model.layers();
    w(layers.len() as u32, &mut out);
    for layer in &layers {
        match layer {
            LayerParams::Conv(l) => {
                let (k, d_in, d_out) = l.weights.dim();
                for v in [TAG_CONV, l.relu as u32, k as u32, d_in as u32, d_out as u32] {
                    w(v, &mut out);
                }
                write_f32s(&mut out, l.weights.iter().copied());
                write_f32s(&mut out, l.affine.scale.iter().copied());
                write_f32s(&mut out, l.affine.shift.iter().copied());
            }
            LayerParams::Unary(l) => {
                for v in [TAG_UNARY, l.relu as u32, 1, l.d_in() as u32, l.d_out() as u32] {
                    w(v, &mut out);
                }
                write_f32s(&mut out, l.weights.iter().copied());
                write_f32s(&mut out, l.affine.scale.iter().copied());
                write_f32s(&mut out, l.affine.shift.iter().copied());
            }
        }
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<KpConvModel, WeightsError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            WeightsError::Truncated
        } else {
            WeightsError::BadMagic
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    r.cur.set_position(MAGIC.len() as u64);
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let first_grid = r.f64()?;
    let radius_factor = r.f64()?;
    let sigma_divisor = r.f64()?;
    let kernel_size = r.u32()? as usize;
    let n_stages = r.u32()? as usize;
    if n_stages > 64 {
        return Err(WeightsError::Shape(format!("{n_stages} encoder stages")));
    }
    let mut channels = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        channels.push(r.u32()? as usize);
    }
    if channels != ENCODER_CHANNELS {
        return Err(WeightsError::Shape(format!(
            "encoder channels {channels:?}, expected {ENCODER_CHANNELS:?}"
        )));
    }
    let out_dim = r.u32()? as usize;
    if out_dim != DESCRIPTOR_DIM {
        return Err(WeightsError::Shape(format!(
            "descriptor dimension {out_dim}, expected {DESCRIPTOR_DIM}"
        )));
    }
    let config = ModelConfig {
        first_grid,
        radius_factor,
        sigma_divisor,
        kernel_size,
    };
    let specs = architecture();
    let n_layers = r.u32()? as usize;
    if n_layers != specs.len() {
        return Err(WeightsError::Shape(format!(
            "{n_layers} layers, architecture needs {}",
            specs.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, spec) in specs.iter().enumerate() {
        let tag = r.u32()?;
        let flags = r.u32()?;
        let k = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let relu = flags & 1 == 1;
        let mismatch = || WeightsError::Shape(format!("layer {i} does not match expected {spec:?}"));
        let layer = match (tag, spec) {
            (TAG_CONV, LayerSpec::Conv { d_in: ei, d_out: eo, stage, relu: er }) => {
                if k != kernel_size || d_in != *ei || d_out != *eo || relu != *er {
                    return Err(mismatch());
                }
                let weights = Array3::from_shape_vec((k, d_in, d_out), r.f32s(k * d_in * d_out)?)
                    .map_err(|e| WeightsError::Shape(e.to_string()))?;
                let affine = Affine {
                    scale: r.f32s(d_out)?,
                    shift: r.f32s(d_out)?,
                };
                LayerParams::Conv(KpConvModel::conv_layer(&config, *stage, weights, affine, relu)?)
            }
            (TAG_UNARY, LayerSpec::Unary { d_in: ei, d_out: eo, relu: er }) => {
                if k != 1 || d_in != *ei || d_out != *eo || relu != *er {
                    return Err(mismatch());
                }
                let weights = Array2::from_shape_vec((d_in, d_out), r.f32s(d_in * d_out)?)
                    .map_err(|e| WeightsError::Shape(e.to_string()))?;
                let affine = Affine {
                    scale: r.f32s(d_out)?,
                    shift: r.f32s(d_out)?,
                };
                LayerParams::Unary(UnaryLayer::new(weights, affine, relu)?)
            }
            (TAG_CONV | TAG_UNARY, _) => return Err(mismatch()),
            (other, _) => return Err(WeightsError::UnknownLayerTag(other)),
        };
        layers.push(layer);
    }
    if r.remaining() > 0 {
        return Err(WeightsError::TrailingBytes(r.remaining()));
    }
    Ok(KpConvModel::assemble(config, layers)?)
}

pub fn save_weights(model: &KpConvModel, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<KpConvModel, WeightsError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

//! Feature binary: magic `K3FT`, little-endian `u32` N and `u32` c, then the
//! N×c response matrix and the N×c descriptor matrix as row-major `f32`.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;

use super::IoError;
use crate::geometry::FeatureMap;

pub const FEATURE_MAGIC: &[u8; 4] = b"K3FT";

pub fn features_to_bytes(f: &FeatureMap) -> Vec<u8> {
    let (n, c) = f.descriptors.dim();
    let mut out = Vec::with_capacity(12 + 8 * n * c);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend((n as u32).to_le_bytes());
    out.extend((c as u32).to_le_bytes());
    for m in [&f.responses, &f.descriptors] {
        for v in m.iter() {
            out.extend((*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureMap, IoError> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(IoError::BadFeatures("missing K3FT header".into()));
    }
    let n = LittleEndian::read_u32(&bytes[4..8]) as usize;
    let c = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let count = n
        .checked_mul(c)
        .ok_or_else(|| IoError::BadFeatures("size overflows".into()))?;
    let expected = 12 + 8 * count;
    if bytes.len() != expected {
        return Err(IoError::BadFeatures(format!(
            "{} bytes for {n}×{c} features, expected {expected}",
            bytes.len()
        )));
    }
    let read = |start: usize| {
        let vals: Vec<f64> = bytes[start..start + 4 * count]
            .chunks_exact(4)
            .map(|b| LittleEndian::read_f32(b) as f64)
            .collect();
        Array2::from_shape_vec((n, c), vals).expect("length checked")
    };
    Ok(FeatureMap {
        responses: read(12),
        descriptors: read(12 + 4 * count),
    })
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMap) -> Result<(), IoError> {
    fs::write(path, features_to_bytes(f))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap, IoError> {
    features_from_bytes(&fs::read(path)?)
}

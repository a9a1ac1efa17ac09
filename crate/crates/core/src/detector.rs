//! Dense keypoint scoring on the response map.
//!
//! The saliency of a point in a channel compares its response to the mean
//! response of its radius neighborhood through a softplus, which does not
//! depend on how many points the neighborhood holds. The local softmax
//! variant is kept as a baseline. The channel-max term favours each point's
//! dominant channel, and the detection score is the best product over channels.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::ScoreMap;
use crate::neighborhood::NeighborLists;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("point {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),
    #[error("{lists} neighbor lists for {points} points")]
    NeighborCount { lists: usize, points: usize },
    #[error("neighbor index {0} out of range")]
    NeighborIndex(usize),
    #[error("negative response {value} at point {point}, channel {channel}")]
    NegativeResponse {
        point: usize,
        channel: usize,
        value: f64,
    },
    #[error("non-finite response at point {0}")]
    NonFiniteResponse(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("cannot select {k} keypoints out of {n}")]
    KeypointCount { k: usize, n: usize },
}

/// Which neighborhood saliency the detection score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaliencyKind {
    /// Softplus of the response minus the neighborhood mean.
    #[default]
    DensityInvariant,
    /// Softmax of the response over the neighborhood.
    LocalSoftmax,
}

/// Selected points in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// First `k` keypoints (all of them if `k` exceeds the count).
    pub fn top(&self, k: usize) -> Self {
        let k = k.min(self.len());
        Self {
            indices: self.indices[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
        }
    }
}

fn check_neighbors(responses: &Array2<f64>, neighbors: &NeighborLists) -> Result<(), DetectorError> {
    let n = responses.nrows();
    if neighbors.len() != n {
        return Err(DetectorError::NeighborCount {
            lists: neighbors.len(),
            points: n,
        });
    }
    for (i, list) in neighbors.iter().enumerate() {
        if list.is_empty() {
            return Err(DetectorError::EmptyNeighborhood(i));
        }
        if let Some(&j) = list.iter().find(|&&j| j >= n) {
            return Err(DetectorError::NeighborIndex(j));
        }
    }
    if let Some(i) = responses
        .rows()
        .into_iter()
        .position(|r| !r.iter().all(|v| v.is_finite()))
    {
        return Err(DetectorError::NonFiniteResponse(i));
    }
    Ok(())
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn per_point<F>(responses: &Array2<f64>, neighbors: &NeighborLists, f: F) -> Array2<f64>
where
    F: Fn(usize, &[usize], &mut [f64]) + Sync,
{
    let mut out = Array2::zeros(responses.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            f(i, neighbors.get(i), row.as_slice_mut().expect("row-major"));
        });
    out
}

/// `α_i^k = softplus(D_i^k − mean_{j ∈ N(i)} D_j^k)`.
pub fn saliency_scores(
    responses: &Array2<f64>,
    neighbors: &NeighborLists,
) -> Result<Array2<f64>, DetectorError> {
    check_neighbors(responses, neighbors)?;
    let c = responses.ncols();
    Ok(per_point(responses, neighbors, |i, list, row| {
        let mut mean = vec![0.0; c];
        for &j in list {
            for (m, v) in mean.iter_mut().zip(responses.row(j)) {
                *m += v;
            }
        }
        let n = list.len() as f64;
        for (k, out) in row.iter_mut().enumerate() {
            *out = softplus(responses[[i, k]] - mean[k] / n);
        }
    }))
}

/// Local softmax baseline `α_i^k = exp(D_i^k) / Σ_{j ∈ N(i)} exp(D_j^k)`,
/// evaluated as `1 / Σ_j exp(D_j^k − D_i^k)`.
pub fn d2_saliency_scores(
    responses: &Array2<f64>,
    neighbors: &NeighborLists,
) -> Result<Array2<f64>, DetectorError> {
    check_neighbors(responses, neighbors)?;
    let c = responses.ncols();
    Ok(per_point(responses, neighbors, |i, list, row| {
        let mut denom = vec![0.0; c];
        for &j in list {
            for (k, d) in denom.iter_mut().enumerate() {
                *d += (responses[[j, k]] - responses[[i, k]]).exp();
            }
        }
        for (out, d) in row.iter_mut().zip(denom) {
            *out = 1.0 / d;
        }
    }))
}

/// `β_i^k = D_i^k / max_t D_i^t`; rows whose maximum is zero score zero.
pub fn channel_max_scores(responses: &Array2<f64>) -> Result<Array2<f64>, DetectorError> {
    for ((i, k), &v) in responses.indexed_iter() {
        if !v.is_finite() {
            return Err(DetectorError::NonFiniteResponse(i));
        }
        if v < 0.0 {
            return Err(DetectorError::NegativeResponse {
                point: i,
                channel: k,
                value: v,
            });
        }
    }
    let mut out = responses.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            row.mapv_inplace(|v| v / max);
        } else {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// `s_i = max_k α_i^k β_i^k`.
pub fn detection_scores(
    saliency: Array2<f64>,
    channel_max: Array2<f64>,
) -> Result<ScoreMap, DetectorError> {
    if saliency.dim() != channel_max.dim() {
        return Err(DetectorError::Shape(saliency.dim(), channel_max.dim()));
    }
    let scores = saliency
        .rows()
        .into_iter()
        .zip(channel_max.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x * y)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(ScoreMap {
        scores,
        saliency,
        channel_max,
    })
}

/// Saliency, channel-max and detection scores in one call.
pub fn score_map(
    responses: &Array2<f64>,
    neighbors: &NeighborLists,
    kind: SaliencyKind,
) -> Result<ScoreMap, DetectorError> {
    let alpha = match kind {
        SaliencyKind::DensityInvariant => saliency_scores(responses, neighbors)?,
        SaliencyKind::LocalSoftmax => d2_saliency_scores(responses, neighbors)?,
    };
    let beta = channel_max_scores(responses)?;
    detection_scores(alpha, beta)
}

/// The `k` best points, ordered by descending score with ties going to the
/// lower index.
pub fn select_keypoints(scores: &[f64], k: usize) -> Result<KeypointSet, DetectorError> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(DetectorError::KeypointCount { k, n });
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(KeypointSet {
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

/// First index of the maximum of `values`.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Points that are the spatial maximum, within their neighborhood, of their
/// own dominant channel. Both argmaxes break ties towards the lowest index.
pub fn hard_keypoints(
    responses: &Array2<f64>,
    neighbors: &NeighborLists,
) -> Result<Vec<usize>, DetectorError> {
    check_neighbors(responses, neighbors)?;
    let keep: Vec<bool> = (0..responses.nrows())
        .into_par_iter()
        .map(|i| {
            let k = first_argmax(responses.row(i).iter().copied());
            let di = responses[[i, k]];
            // Lists are ascending, so "first maximum" means: nothing before i
            // reaches D_i, nothing after i exceeds it.
            neighbors.get(i).iter().all(|&j| {
                let dj = responses[[j, k]];
                if j < i {
                    dj < di
                } else {
                    dj <= di
                }
            })
        })
        .collect();
    Ok(keep
        .into_iter()
        .enumerate()
        .filter_map(|(i, k)| k.then_some(i))
        .collect())
}

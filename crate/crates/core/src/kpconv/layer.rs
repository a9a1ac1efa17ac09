use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::kernel::KernelLayout;
use super::KpConvError;
use crate::geometry::Point;
use crate::neighborhood::NeighborLists;

/// Batch normalization folded into a per-channel `scale·x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Affine {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    #[inline]
    fn apply(&self, row: &mut [f64], relu: bool) {
        for ((v, s), b) in row.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = *v * s + b;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Kernel point convolution followed by a folded batch norm and an optional
/// rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `K × D_in × D_out`; slice `k` is the weight matrix of kernel point `k`.
    pub weights: Array3<f64>,
    pub radius: f64,
    pub kernel: KernelLayout,
    pub affine: Affine,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new(
        weights: Array3<f64>,
        radius: f64,
        kernel: KernelLayout,
        affine: Affine,
        relu: bool,
    ) -> Result<Self, KpConvError> {
        let (k, _, d_out) = weights.dim();
        if k != kernel.len() {
            return Err(KpConvError::Shape(format!(
                "{k} weight matrices for {} kernel points",
                kernel.len()
            )));
        }
        if affine.scale.len() != d_out || affine.shift.len() != d_out {
            return Err(KpConvError::Shape(format!(
                "affine has {} channels, layer outputs {d_out}",
                affine.len()
            )));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(KpConvError::InvalidKernel(format!("radius {radius}")));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            radius,
            kernel,
            affine,
            relu,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn d_out(&self) -> usize {
        self.weights.dim().2
    }

    /// Raw convolution at `center` over the supports listed in `neighbors`,
    /// written into `out` (length `D_out`). Returns the neighbor count.
    fn convolve_into<I>(
        &self,
        center: &Point,
        supports: &[Point],
        features: &ArrayView2<f64>,
        neighbors: I,
        normalized: bool,
        out: &mut [f64],
    ) -> usize
    where
        I: IntoIterator<Item = usize>,
    {
        let d_in = self.d_in();
        let kp = self.kernel.points();
        let sigma = self.kernel.sigma();
        let mut agg = vec![0.0; kp.len() * d_in];
        let mut count = 0usize;
        for j in neighbors {
            count += 1;
            let offset = supports[j] - center;
            let f = features.row(j);
            for (k, p) in kp.iter().enumerate() {
                let h = super::kernel::correlation(&offset, p, sigma);
                if h > 0.0 {
                    for (a, v) in agg[k * d_in..(k + 1) * d_in].iter_mut().zip(f.iter()) {
                        *a += h * v;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        if count == 0 {
            return 0;
        }
        let w = self
            .weights
            .as_slice()
            .expect("weights are kept in standard layout");
        let d_out = self.d_out();
        for (r, &a) in agg.iter().enumerate() {
            if a != 0.0 {
                for (o, wv) in out.iter_mut().zip(&w[r * d_out..(r + 1) * d_out]) {
                    *o += a * wv;
                }
            }
        }
        if normalized {
            let n = count as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        count
    }

    /// Normalized convolution, affine and rectifier for every query, with
    /// neighbors visited in the order given by `lists`.
    pub(crate) fn forward_lists(
        &self,
        queries: &[Point],
        supports: &[Point],
        lists: &[Vec<usize>],
        features: &Array2<f64>,
    ) -> Array2<f64> {
        let view = features.view();
        let mut out = Array2::zeros((queries.len(), self.d_out()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let row = row.as_slice_mut().expect("row-major output");
                let n = self.convolve_into(
                    &queries[i],
                    supports,
                    &view,
                    lists[i].iter().copied(),
                    true,
                    row,
                );
                if n > 0 {
                    self.affine.apply(row, self.relu);
                }
            });
        out
    }
}

/// Kernel point convolution at one center.
///
/// With `normalized = false` this is the plain sum over the neighborhood;
/// with `normalized = true` the sum is divided by the neighbor count. An
/// empty neighborhood yields the zero vector.
pub fn kpconv_apply(
    center: &Point,
    neighbor_points: &[Point],
    neighbor_features: ArrayView2<f64>,
    layer: &ConvLayer,
    normalized: bool,
) -> Result<Vec<f64>, KpConvError> {
    if neighbor_features.nrows() != neighbor_points.len() {
        return Err(KpConvError::Shape(format!(
            "{} neighbor features for {} neighbor points",
            neighbor_features.nrows(),
            neighbor_points.len()
        )));
    }
    if neighbor_features.ncols() != layer.d_in() {
        return Err(KpConvError::Shape(format!(
            "features have {} channels, layer expects {}",
            neighbor_features.ncols(),
            layer.d_in()
        )));
    }
    let mut out = vec![0.0; layer.d_out()];
    layer.convolve_into(
        center,
        neighbor_points,
        &neighbor_features,
        0..neighbor_points.len(),
        normalized,
        &mut out,
    );
    Ok(out)
}

/// One convolution layer over a whole stage: normalized convolution per query,
/// folded batch norm, then the rectifier when the layer has one. Queries with
/// no neighbors produce zero rows.
pub fn layer_forward(
    queries: &[Point],
    supports: &[Point],
    neighbors: &NeighborLists,
    features: &Array2<f64>,
    layer: &ConvLayer,
) -> Result<Array2<f64>, KpConvError> {
    if neighbors.len() != queries.len() {
        return Err(KpConvError::Shape(format!(
            "{} neighbor lists for {} queries",
            neighbors.len(),
            queries.len()
        )));
    }
    if features.nrows() != supports.len() || features.ncols() != layer.d_in() {
        return Err(KpConvError::Shape(format!(
            "features {:?} for {} supports and {} input channels",
            features.dim(),
            supports.len(),
            layer.d_in()
        )));
    }
    if let Some(bad) = neighbors.iter().flatten().find(|&&j| j >= supports.len()) {
        return Err(KpConvError::Shape(format!("neighbor index {bad} out of range")));
    }
    let lists: Vec<Vec<usize>> = neighbors.iter().map(<[usize]>::to_vec).collect();
    Ok(layer.forward_lists(queries, supports, &lists, features))
}

/// Pointwise (1×1) linear layer with folded batch norm and optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryLayer {
    /// `D_in × D_out`.
    pub weights: Array2<f64>,
    pub affine: Affine,
    pub relu: bool,
}

impl UnaryLayer {
    pub fn new(weights: Array2<f64>, affine: Affine, relu: bool) -> Result<Self, KpConvError> {
        if affine.scale.len() != weights.ncols() || affine.shift.len() != weights.ncols() {
            return Err(KpConvError::Shape(format!(
                "affine has {} channels, layer outputs {}",
                affine.len(),
                weights.ncols()
            )));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            affine,
            relu,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.d_in());
        let d_out = self.d_out();
        let w = self
            .weights
            .as_slice()
            .expect("weights are kept in standard layout");
        let mut out = Array2::zeros((x.nrows(), d_out));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)))
            .for_each(|(mut row, xin)| {
                let row = row.as_slice_mut().expect("row-major output");
                for (r, &a) in xin.iter().enumerate() {
                    if a != 0.0 {
                        for (o, wv) in row.iter_mut().zip(&w[r * d_out..(r + 1) * d_out]) {
                            *o += a * wv;
                        }
                    }
                }
                self.affine.apply(row, self.relu);
            });
        out
    }
}

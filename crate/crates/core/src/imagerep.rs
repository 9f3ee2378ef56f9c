//! Scalogram-to-image conversion: sensor projection (learned or PCA-3),
//! bilinear resize and per-channel standardization.
//!
//! The learned path runs inside the autodiff graph (see
//! [`crate::autonn::Graph::channel_mix`], [`crate::autonn::Graph::resize_bilinear`]
//! and [`crate::autonn::Graph::standardize`]); the functions here are the
//! plain-array equivalents and share the interpolation kernels with it.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autonn::{Array, Scalar};
use crate::error::{Error, Result};

/// Absolute floor applied to standard deviations before division.
pub const STD_FLOOR: f64 = 1e-8;

pub const IMAGE_CHANNELS: usize = 3;

/// Per-axis interpolation taps for half-pixel-center bilinear resizing.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

impl AxisPlan {
    /// Output index `i` samples input coordinate `(i + 0.5) * n_in / n_out - 0.5`,
    /// clamped to `[0, n_in - 1]`.
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let last = n_in.saturating_sub(1);
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            frac: Vec::with_capacity(n_out),
        };
        for i in 0..n_out {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last as f64);
            let lo = (x.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(x - lo as f64);
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// Resize one row-major plane of width `in_w` into `dst` ([rows.len(), cols.len()]).
pub fn resize_plane<T: Scalar>(src: &[T], in_w: usize, rows: &AxisPlan, cols: &AxisPlan, dst: &mut [T]) {
    let ow = cols.len();
    let cf: Vec<T> = cols.frac.iter().map(|&f| T::lit(f)).collect();
    let mut tmp_lo = vec![T::zero(); ow];
    let mut tmp_hi = vec![T::zero(); ow];
    for (i, out_row) in dst.chunks_mut(ow).enumerate() {
        let rf = T::lit(rows.frac[i]);
        let r0 = &src[rows.lo[i] * in_w..][..in_w];
        let r1 = &src[rows.hi[i] * in_w..][..in_w];
        for j in 0..ow {
            let (a, b) = (cols.lo[j], cols.hi[j]);
            tmp_lo[j] = r0[a] + (r0[b] - r0[a]) * cf[j];
            tmp_hi[j] = r1[a] + (r1[b] - r1[a]) * cf[j];
        }
        for j in 0..ow {
            out_row[j] = tmp_lo[j] + (tmp_hi[j] - tmp_lo[j]) * rf;
        }
    }
}

/// Adjoint of [`resize_plane`]: scatter-adds `grad` ([rows, cols]) into `dst`.
pub fn resize_plane_adjoint<T: Scalar>(grad: &[T], in_w: usize, rows: &AxisPlan, cols: &AxisPlan, dst: &mut [T]) {
    let ow = cols.len();
    for (i, g_row) in grad.chunks(ow).enumerate() {
        let rf = T::lit(rows.frac[i]);
        let (w0, w1) = (T::one() - rf, rf);
        for j in 0..ow {
            let cf = T::lit(cols.frac[j]);
            let g = g_row[j];
            let (a, b) = (cols.lo[j], cols.hi[j]);
            let (g0, g1) = (g * w0, g * w1);
            let r0 = rows.lo[i] * in_w;
            let r1 = rows.hi[i] * in_w;
            dst[r0 + a] = dst[r0 + a] + g0 * (T::one() - cf);
            dst[r0 + b] = dst[r0 + b] + g0 * cf;
            dst[r1 + a] = dst[r1 + a] + g1 * (T::one() - cf);
            dst[r1 + b] = dst[r1 + b] + g1 * cf;
        }
    }
}

/// Mean and population standard deviation, accumulated in double precision.
pub fn mean_sd<T: Scalar>(xs: &[T]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Bilinear resize of the last two axes of `image` ([..., H, W]).
pub fn resize_bilinear<T: Scalar>(image: &Array<T>, out_h: usize, out_w: usize) -> Result<Array<T>> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2] == 0 || s[s.len() - 1] == 0 {
        return Err(Error::shape("resize_bilinear", format!("input {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let rows = AxisPlan::new(h, out_h);
    let cols = AxisPlan::new(w, out_w);
    let mut shape = s.to_vec();
    let nd = shape.len();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    let mut out = Array::zeros(&shape);
    for (src, dst) in image.data().chunks(h * w).zip(out.data_mut().chunks_mut(out_h * out_w)) {
        resize_plane(src, w, &rows, &cols, dst);
    }
    Ok(out)
}

/// Per-channel statistics recorded by [`standardize_image`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Shift and scale every channel of `image` ([C, H, W]) to mean 0 and SD 1.
pub fn standardize_image<T: Scalar>(image: &Array<T>) -> Result<(Array<T>, ChannelStats)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("standardize_image", format!("input {:?}", s)));
    }
    if !image.all_finite() {
        return Err(Error::NonFinite {
            site: "standardize_image".into(),
            detail: "input contains non-finite values".into(),
        });
    }
    let p = s[1] * s[2];
    let mut out = image.clone();
    let mut stats = ChannelStats {
        mean: Vec::with_capacity(s[0]),
        sd: Vec::with_capacity(s[0]),
    };
    for plane in out.data_mut().chunks_mut(p.max(1)) {
        let (m, sd) = mean_sd(plane);
        let inv = T::lit(1.0 / sd.max(STD_FLOOR));
        let mt = T::lit(m);
        plane.iter_mut().for_each(|v| *v = (*v - mt) * inv);
        stats.mean.push(m);
        stats.sd.push(sd);
    }
    Ok((out, stats))
}

/// `out[c, ...] = sum_s weights[c, s] * input[s, ...] + bias[c]` for one
/// scalogram ([S, F, T]).
pub fn project_sensors<T: Scalar>(input: &Array<T>, weights: &Array<T>, bias: &[T]) -> Result<Array<T>> {
    let s = input.shape();
    let ws = weights.shape();
    if s.is_empty() || ws.len() != 2 || ws[1] != s[0] || bias.len() != ws[0] {
        return Err(Error::shape(
            "project_sensors",
            format!("input {:?}, weights {:?}, bias {}", s, ws, bias.len()),
        ));
    }
    let (c_out, c_in) = (ws[0], ws[1]);
    let p: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = c_out;
    let mut out = Array::zeros(&shape);
    T::gemm(false, false, c_out, p, c_in, T::one(), weights.data(), input.data(), T::zero(), out.data_mut());
    for (plane, &b) in out.data_mut().chunks_mut(p.max(1)).zip(bias) {
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(out)
}

/// Fixed three-component PCA projection over the sensor axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// [3, n_sensors], orthonormal rows.
    pub components: Array<f64>,
    pub mean: Vec<f64>,
    pub explained_variance: Vec<f64>,
    /// Identifies the training fold the projection was fitted on.
    pub fit_digest: String,
}

impl PcaProjection {
    pub fn n_sensors(&self) -> usize {
        self.mean.len()
    }

    /// Centers `input` ([S, ...]) and projects it onto the components.
    pub fn apply<T: Scalar>(&self, input: &Array<T>) -> Result<Array<T>> {
        let s = input.shape();
        if s.is_empty() || s[0] != self.n_sensors() {
            return Err(Error::shape(
                "pca_apply",
                format!("input {:?} vs {} sensors", s, self.n_sensors()),
            ));
        }
        let comps: Array<T> = self.components.cast();
        // Bias absorbs the centering: W (x - m) = W x - W m.
        let bias: Vec<T> = (0..IMAGE_CHANNELS)
            .map(|c| {
                let row = &self.components.data()[c * self.n_sensors()..][..self.n_sensors()];
                T::lit(-row.iter().zip(&self.mean).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        project_sensors(input, &comps, &bias)
    }
}

/// Streaming sensor-axis moments for [`fit_pca3`]; every (epoch,
/// frequency, time) triple is one S-dimensional observation.
#[derive(Debug, Clone)]
pub struct PcaAccumulator {
    n_sensors: Option<usize>,
    count: usize,
    sum: Vec<f64>,
    /// Upper triangle of the uncentred cross-product matrix.
    cross: DMatrix<f64>,
}

impl Default for PcaAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl PcaAccumulator {
    pub fn new() -> Self {
        PcaAccumulator {
            n_sensors: None,
            count: 0,
            sum: Vec::new(),
            cross: DMatrix::zeros(0, 0),
        }
    }

    /// Adds one [S, ...] scalogram.
    pub fn push<T: Scalar>(&mut self, sc: &Array<T>) -> Result<()> {
        let ns = *sc.shape().first().ok_or_else(|| Error::shape("fit_pca3", "scalar input"))?;
        match self.n_sensors {
            None => {
                self.n_sensors = Some(ns);
                self.sum = vec![0.0; ns];
                self.cross = DMatrix::zeros(ns, ns);
            }
            Some(n) if n != ns => {
                return Err(Error::shape("fit_pca3", format!("{} vs {} sensors", n, ns)));
            }
            _ => {}
        }
        let p = sc.len() / ns.max(1);
        let data = sc.data();
        let mut obs = vec![0.0; ns];
        for j in 0..p {
            for (i, o) in obs.iter_mut().enumerate() {
                *o = data[i * p + j].as_f64();
            }
            for i in 0..ns {
                self.sum[i] += obs[i];
                for k in i..ns {
                    self.cross[(i, k)] += obs[i] * obs[k];
                }
            }
        }
        self.count += p;
        Ok(())
    }

    pub fn finish(self, fit_digest: impl Into<String>) -> Result<PcaProjection> {
        let PcaAccumulator {
            n_sensors,
            count,
            sum,
            cross,
        } = self;
        pca_from_moments(n_sensors, count, &sum, &cross, fit_digest.into())
    }
}

/// PCA over the sensor axis of training scalograms ([S, F, T] each).
pub fn fit_pca3<'a, T: Scalar>(
    scalograms: impl IntoIterator<Item = &'a Array<T>>,
    fit_digest: impl Into<String>,
) -> Result<PcaProjection> {
    let mut acc = PcaAccumulator::new();
    for sc in scalograms {
        acc.push(sc)?;
    }
    acc.finish(fit_digest)
}

fn pca_from_moments(
    n_sensors: Option<usize>,
    count: usize,
    sum: &[f64],
    cross: &DMatrix<f64>,
    fit_digest: String,
) -> Result<PcaProjection> {
    let ns = n_sensors.unwrap_or(0);
    if ns < IMAGE_CHANNELS {
        return Err(Error::InvalidInput(format!("PCA-3 needs at least 3 sensors, got {}", ns)));
    }
    if count < IMAGE_CHANNELS {
        return Err(Error::InsufficientData(format!("PCA-3 needs at least 3 observations, got {}", count)));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut cov = DMatrix::<f64>::zeros(ns, ns);
    for i in 0..ns {
        for k in i..ns {
            let v = cross[(i, k)] / n - mean[i] * mean[k];
            cov[(i, k)] = v;
            cov[(k, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..ns).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * ns as f64;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < IMAGE_CHANNELS || top <= 0.0 {
        return Err(Error::Rank {
            achieved: rank,
            required: IMAGE_CHANNELS,
        });
    }
    let mut comps = Vec::with_capacity(IMAGE_CHANNELS * ns);
    let mut explained = Vec::with_capacity(IMAGE_CHANNELS);
    for &k in order.iter().take(IMAGE_CHANNELS) {
        let col = eig.eigenvectors.column(k);
        let norm = col.norm();
        let pivot = col
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        comps.extend(col.iter().map(|v| sign * v / norm));
        explained.push(eig.eigenvalues[k]);
    }
    Ok(PcaProjection {
        components: Array::from_vec(&[IMAGE_CHANNELS, ns], comps)?,
        mean,
        explained_variance: explained,
        fit_digest,
    })
}

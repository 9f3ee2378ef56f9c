//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and only visits nodes that depend on a leaf with `requires_grad`, so frozen
//! parameters cost nothing in the backward sweep and never receive gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{Array, Scalar};
use super::conv::{chunk_size, col2im, im2col, ConvDims, ConvGeom};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::imagerep::{AxisPlan, STD_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelMix {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Elu {
        x: Var,
        alpha: T,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        kh: usize,
        kw: usize,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Resize {
        x: Var,
        rows: AxisPlan,
        cols: AxisPlan,
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    SigmoidBce {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    Dot {
        x: Var,
        coeffs: Arc<Array<T>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::ChannelMix { .. } => "channel_mix",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Elu { .. } => "elu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Add(..) => "add",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Resize { .. } => "resize_bilinear",
            Op::Standardize { .. } => "standardize",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: IndexMap<String, Array<T>>,
    leaves: BTreeMap<usize, Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Array<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Array<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Array<T>> {
        self.params
    }

    /// Gradient with respect to an input leaf created with `requires_grad`.
    pub fn input(&self, v: Var) -> Option<&Array<T>> {
        self.leaves.get(&v.0)
    }
}

impl<T: Scalar> Graph<T> {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// Leaf bound to a named parameter. Gradients flow to it iff the parameter
    /// is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Param(name.to_string()),
            requires_grad: p.trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// First node (in tape order) holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", xs, ws)));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = geom.groups;
        if g == 0 || c % g != 0 || o % g != 0 || c / g != cg {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} / groups {} vs weight {:?}", c, g, ws),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = geom.output_hw(h, wd, kh, kw).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h, wd))
        })?;
        let d = ConvDims { c, h, w: wd, kh, kw, ho, wo };
        let og = o / g;
        let rows = cg * kh * kw;
        let ohw = d.out_hw();
        let mut out = Array::<T>::zeros(&[n, o, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let out_d = out.data_mut();
            let nb_max = chunk_size(rows, ohw, n);
            let mut cols = vec![T::zero(); rows * nb_max * ohw];
            let mut prod = vec![T::zero(); og * nb_max * ohw];
            for gi in 0..g {
                let wg = &wv[gi * og * rows..(gi + 1) * og * rows];
                let mut n0 = 0;
                while n0 < n {
                    let nb = nb_max.min(n - n0);
                    let ncols = nb * ohw;
                    im2col(xv, &d, &geom, n0, nb, gi * cg, cg, &mut cols[..rows * ncols]);
                    T::gemm(false, false, og, ncols, rows, T::one(), wg, &cols[..rows * ncols], T::zero(), &mut prod[..og * ncols]);
                    for oc in 0..og {
                        for nl in 0..nb {
                            let dst = &mut out_d[((n0 + nl) * o + gi * og + oc) * ohw..][..ohw];
                            dst.copy_from_slice(&prod[oc * ncols + nl * ohw..][..ohw]);
                        }
                    }
                    n0 += nb;
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for chunk in out_d.chunks_mut(o * ohw) {
                    for (oc, plane) in chunk.chunks_mut(ohw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bv[oc]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {:?}, weight {:?}", xs, ws)));
        }
        let (n, k, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = Array::zeros(&[n, o]);
        T::gemm(false, true, n, o, k, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(o) {
                row.iter_mut().zip(&bv).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Mixes the channel axis of `x` ([N, C, ...]) with `w` ([O, C]): a 1x1 convolution.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("channel_mix", format!("input {:?}, weight {:?}", xs, ws)));
        }
        let (n, c, o) = (xs[0], xs[1], ws[0]);
        let p: usize = xs[2..].iter().product();
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("channel_mix", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut shape = xs.clone();
        shape[1] = o;
        let mut out = Array::zeros(&shape);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                T::gemm(false, false, o, p, c, T::one(), wv, &xv[i * c * p..(i + 1) * c * p], T::zero(), &mut od[i * o * p..(i + 1) * o * p]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for chunk in od.chunks_mut(o * p) {
                    for (oc, plane) in chunk.chunks_mut(p).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bv[oc]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(out, Op::ChannelMix { x, w, b }, rg))
    }

    /// Batch normalization in inference mode: fixed running statistics,
    /// learnable affine scale and shift.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {:?}", xs)));
        }
        let c = xs[1];
        for v in [gamma, beta, mean, var] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm", format!("channel stats {:?} vs {} channels", self.shape(v), c)));
            }
        }
        let p: usize = xs[2..].iter().product();
        let mu = self.value(mean).data().to_vec();
        let inv_std: Vec<T> = self
            .value(var)
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c * p) {
            for (ch, plane) in chunk.chunks_mut(p).enumerate() {
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mu[ch] * scale;
                plane.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean: mu, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::lit(alpha);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * (v.exp() - T::one()) });
        let rg = self.rg(x);
        self.push(out, Op::Elu { x, alpha: a }, rg)
    }

    /// Max pooling over [N, C, H, W] with implicit -inf padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("max_pool2d", format!("kernel {} on {}x{}", kernel, h, w)));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let mut out = Array::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xv = self.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ki in 0..kernel {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oh) * wo + ow;
                    od[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Average pooling with stride equal to the kernel, no padding, floor mode.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < kh || xs[3] < kw || kh == 0 || kw == 0 {
            return Err(Error::shape("avg_pool2d", format!("input {:?}, kernel {}x{}", xs, kh, kw)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / kh, w / kw);
        let scale = T::one() / T::lit((kh * kw) as f64);
        let mut out = Array::zeros(&[n, c, ho, wo]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for ki in 0..kh {
                        for kj in 0..kw {
                            s = s + xv[(plane * h + oh * kh + ki) * w + ow * kw + kj];
                        }
                    }
                    od[(plane * ho + oh) * wo + ow] = s * scale;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2d { x, kh, kw }, rg))
    }

    /// [N, C, H, W] -> [N, C]
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", xs)));
        }
        let p = xs[2] * xs[3];
        let scale = T::one() / T::lit(p as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(p)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Array::from_vec(&[xs[0], xs[1]], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Bilinear resize of the last two axes of [N, C, H, W] with half-pixel
    /// centers and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::shape("resize_bilinear", format!("input {:?}", xs)));
        }
        let rows = AxisPlan::new(xs[2], out_h);
        let cols = AxisPlan::new(xs[3], out_w);
        let mut out = Array::zeros(&[xs[0], xs[1], out_h, out_w]);
        let (h, w) = (xs[2], xs[3]);
        for (src, dst) in self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(out_h * out_w))
        {
            crate::imagerep::resize_plane(src, w, &rows, &cols, dst);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, rows, cols }, rg))
    }

    /// Per-(sample, channel) standardization over the trailing axes.
    pub fn standardize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("standardize", format!("input {:?}", xs)));
        }
        let p: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        for plane in out.data_mut().chunks_mut(p) {
            let (mean, sd) = crate::imagerep::mean_sd(plane);
            let inv = 1.0 / sd.max(STD_FLOOR);
            let (m, i) = (T::lit(mean), T::lit(inv));
            plane.iter_mut().for_each(|v| *v = (*v - m) * i);
            // A floored SD marks the plane as constant-scale in the backward pass.
            inv_std.push(if sd > STD_FLOOR { i } else { -i });
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Standardize { x, inv_std }, rg))
    }

    /// Mean over the batch of `weight[label] * CE(softmax(logits), label)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[1] != class_weights.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels, {} class weights", s, labels.len(), class_weights.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {} outside {}-way head", bad, k)));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut weights = Vec::with_capacity(n);
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let se: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + se.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            let wi = class_weights[labels[i]];
            weights.push(T::lit(wi));
            loss += wi * (lse - row[labels[i]]).as_f64();
        }
        let out = Array::scalar(T::lit(loss / n as f64));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), weights }, rg))
    }

    /// Mean over the batch of `weight[label] * BCE(sigmoid(logit), label)` for a
    /// single-logit head.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != 1 || s[0] != labels.len() || class_weights.len() != 2 {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("logits {:?}, {} labels, {} class weights", s, labels.len(), class_weights.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidInput(format!("label {} outside binary head", bad)));
        }
        let n = s[0];
        let z = self.value(logits).data();
        let mut weights = Vec::with_capacity(n);
        let mut loss = 0.0f64;
        for i in 0..n {
            let zi = z[i].as_f64();
            let y = labels[i] as f64;
            let l = zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p();
            let wi = class_weights[labels[i]];
            weights.push(T::lit(wi));
            loss += wi * l;
        }
        let out = Array::scalar(T::lit(loss / n as f64));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SigmoidBce { logits, labels: labels.to_vec(), weights }, rg))
    }

    /// Scalar `sum(coeffs * x)`; the probe loss used by gradient checks.
    pub fn dot(&mut self, x: Var, coeffs: Arc<Array<T>>) -> Result<Var> {
        if self.shape(x) != coeffs.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape(x), coeffs.shape())));
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Array::scalar(s), Op::Dot { x, coeffs }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            let site = self
                .first_non_finite()
                .map(|(i, op)| format!("node {} ({})", i, op))
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite {
                site,
                detail: format!("loss = {:?}", lv.data()[0]),
            });
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));
        let mut out = Gradients {
            params: IndexMap::new(),
            leaves: BTreeMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.leaves.insert(i, gy);
                }
                Op::Param(name) => match out.params.get_mut(name) {
                    Some(acc) => acc.add_assign(&gy),
                    None => {
                        out.params.insert(name.clone(), gy);
                    }
                },
                op => self.backward_op(op, &node.value, &gy, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, y: &Array<T>, gy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, gy, grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, k) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = Array::zeros(&[n, k]);
                    T::gemm(false, false, n, k, o, T::one(), gy.data(), self.value(*w).data(), T::zero(), dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Array::zeros(&[o, k]);
                    T::gemm(true, false, o, k, n, T::one(), gy.data(), self.value(*x).data(), T::zero(), dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = Array::zeros(&[o]);
                    for row in gy.data().chunks(o) {
                        db.data_mut().iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::ChannelMix { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let p: usize = xs[2..].iter().product();
                if self.rg(*x) {
                    let mut dx = Array::zeros(&xs);
                    let wv = self.value(*w).data();
                    for i in 0..n {
                        T::gemm(true, false, c, p, o, T::one(), wv, &gy.data()[i * o * p..(i + 1) * o * p], T::zero(), &mut dx.data_mut()[i * c * p..(i + 1) * c * p]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Array::zeros(&[o, c]);
                    let xv = self.value(*x).data();
                    for i in 0..n {
                        T::gemm(false, true, o, c, p, T::one(), &gy.data()[i * o * p..(i + 1) * o * p], &xv[i * c * p..(i + 1) * c * p], T::one(), dw.data_mut());
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    self.accumulate(grads, b, channel_sums(gy, o, p));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                let xs = self.shape(*x).to_vec();
                let c = xs[1];
                let p: usize = xs[2..].iter().product();
                let gv = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for chunk in dx.data_mut().chunks_mut(c * p) {
                        for (ch, plane) in chunk.chunks_mut(p).enumerate() {
                            let s = gv[ch] * inv_std[ch];
                            plane.iter_mut().for_each(|v| *v = *v * s);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    let mut dg = Array::zeros(&[c]);
                    let xv = self.value(*x).data();
                    for (xc, gc) in xv.chunks(c * p).zip(gy.data().chunks(c * p)) {
                        for ch in 0..c {
                            let s: T = xc[ch * p..(ch + 1) * p]
                                .iter()
                                .zip(&gc[ch * p..(ch + 1) * p])
                                .map(|(&xv, &g)| (xv - mean[ch]) * inv_std[ch] * g)
                                .sum();
                            dg.data_mut()[ch] = dg.data()[ch] + s;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, channel_sums(gy, c, p));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let mut dx = gy.clone();
                dx.data_mut().iter_mut().zip(xv).for_each(|(g, &v)| {
                    if v <= T::zero() {
                        *g = T::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Elu { x, alpha } => {
                let xv = self.value(*x).data();
                let mut dx = gy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(xv.iter().zip(y.data()))
                    .for_each(|(g, (&v, &yv))| {
                        if v <= T::zero() {
                            *g = *g * (yv + *alpha)
                        }
                    });
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Array::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &g) in argmax.iter().zip(gy.data()) {
                    d[i] = d[i] + g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2d { x, kh, kw } => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / kh, w / kw);
                let scale = T::one() / T::lit((kh * kw) as f64);
                let mut dx = Array::zeros(&xs);
                let d = dx.data_mut();
                for plane in 0..xs[0] * xs[1] {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = gy.data()[(plane * ho + oh) * wo + ow] * scale;
                            for ki in 0..*kh {
                                for kj in 0..*kw {
                                    let idx = (plane * h + oh * kh + ki) * w + ow * kw + kj;
                                    d[idx] = d[idx] + g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let p = xs[2] * xs[3];
                let scale = T::one() / T::lit(p as f64);
                let mut dx = Array::zeros(&xs);
                for (plane, &g) in dx.data_mut().chunks_mut(p).zip(gy.data()) {
                    plane.iter_mut().for_each(|v| *v = g * scale);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Dropout { x, mask } => {
                let mut dx = gy.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(g, &m)| *g = *g * m);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshape(self.shape(*x)).expect("reshape preserves size");
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x, rows, cols } => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (rows.len(), cols.len());
                let mut dx = Array::zeros(&xs);
                for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
                    crate::imagerep::resize_plane_adjoint(src, w, rows, cols, dst);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Standardize { x, inv_std } => {
                let xs = self.shape(*x);
                let p: usize = xs[2..].iter().product();
                let pn = T::lit(p as f64);
                let mut dx = gy.clone();
                for ((g, yp), &s) in dx.data_mut().chunks_mut(p).zip(y.data().chunks(p)).zip(inv_std) {
                    let mean_g: T = g.iter().copied().sum::<T>() / pn;
                    if s < T::zero() {
                        // Floored SD: the scale is a constant, only the mean is subtracted.
                        g.iter_mut().for_each(|v| *v = (*v - mean_g) * (-s));
                    } else {
                        let mean_gy: T = g.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / pn;
                        g.iter_mut()
                            .zip(yp)
                            .for_each(|(v, &yv)| *v = (*v - mean_g - yv * mean_gy) * s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { logits, probs, labels, weights } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = gy.data()[0] / T::lit(n as f64);
                let mut dz = Array::from_vec(self.shape(*logits), probs.clone()).expect("same shape");
                for (i, row) in dz.data_mut().chunks_mut(k).enumerate() {
                    row[labels[i]] = row[labels[i]] - T::one();
                    let f = weights[i] * scale;
                    row.iter_mut().for_each(|v| *v = *v * f);
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::SigmoidBce { logits, labels, weights } => {
                let n = labels.len();
                let scale = gy.data()[0] / T::lit(n as f64);
                let z = self.value(*logits).data();
                let data = (0..n)
                    .map(|i| {
                        let s = T::one() / (T::one() + (-z[i]).exp());
                        (s - T::lit(labels[i] as f64)) * weights[i] * scale
                    })
                    .collect();
                let dz = Array::from_vec(self.shape(*logits), data).expect("same shape");
                self.accumulate(grads, *logits, dz);
            }
            Op::Dot { x, coeffs } => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, coeffs.map(|c| c * g));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, gy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let gys = gy.shape();
        let (ho, wo) = (gys[2], gys[3]);
        let d = ConvDims { c, h, w: wd, kh, kw, ho, wo };
        let g = geom.groups;
        let og = o / g;
        let rows = cg * kh * kw;
        let ohw = d.out_hw();
        let need_dx = self.rg(x);
        let need_dw = self.rg(w);
        if need_dx || need_dw {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut dx = if need_dx { Some(Array::<T>::zeros(&xs)) } else { None };
            let mut dw = if need_dw { Some(Array::<T>::zeros(&ws)) } else { None };
            let nb_max = chunk_size(rows, ohw, n);
            let mut cols = vec![T::zero(); rows * nb_max * ohw];
            let mut gyg = vec![T::zero(); og * nb_max * ohw];
            for gi in 0..g {
                let wg = &wv[gi * og * rows..(gi + 1) * og * rows];
                let mut n0 = 0;
                while n0 < n {
                    let nb = nb_max.min(n - n0);
                    let ncols = nb * ohw;
                    for oc in 0..og {
                        for nl in 0..nb {
                            gyg[oc * ncols + nl * ohw..][..ohw]
                                .copy_from_slice(&gy.data()[((n0 + nl) * o + gi * og + oc) * ohw..][..ohw]);
                        }
                    }
                    let gyg = &gyg[..og * ncols];
                    if let Some(dw) = dw.as_mut() {
                        im2col(xv, &d, geom, n0, nb, gi * cg, cg, &mut cols[..rows * ncols]);
                        T::gemm(false, true, og, rows, ncols, T::one(), gyg, &cols[..rows * ncols], T::one(), &mut dw.data_mut()[gi * og * rows..(gi + 1) * og * rows]);
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(true, false, rows, ncols, og, T::one(), wg, gyg, T::zero(), &mut cols[..rows * ncols]);
                        col2im(&cols[..rows * ncols], &d, geom, n0, nb, gi * cg, cg, dx.data_mut());
                    }
                    n0 += nb;
                }
            }
            if let Some(dx) = dx {
                self.accumulate(grads, x, dx);
            }
            if let Some(dw) = dw {
                self.accumulate(grads, w, dw);
            }
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            self.accumulate(grads, b, channel_sums(gy, o, ohw));
        }
    }
}

/// Sum of `a` ([N, C, P...]) over every axis except the channel axis.
fn channel_sums<T: Scalar>(a: &Array<T>, c: usize, p: usize) -> Array<T> {
    let mut s = Array::zeros(&[c]);
    for chunk in a.data().chunks(c * p) {
        for (ch, plane) in chunk.chunks(p).enumerate() {
            s.data_mut()[ch] = s.data()[ch] + plane.iter().copied().sum::<T>();
        }
    }
    s
}

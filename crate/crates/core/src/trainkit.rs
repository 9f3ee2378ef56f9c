//! Training recipe: AdamW with decoupled decay, per-step cosine schedule,
//! class-weighted losses, global-norm clipping and on-the-fly augmentation.

use std::sync::atomic::{AtomicBool, Ordering};

use indexmap::IndexMap;
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autonn::{Array, Graph, HeadKind, ModelSpec, ParamKind, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::preproc::EpochSet;
use crate::tfr::CwtCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_head: f64,
    pub lr_unfrozen: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_head: 1e-3,
            lr_unfrozen: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            epochs: 30,
            batch_size: 32,
            clip_max_norm: 1.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_head > 0.0
            && self.lr_unfrozen >= 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.clip_max_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer configuration {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub enabled: bool,
    /// Shift magnitude range in ms; the sign is drawn uniformly.
    pub temporal_shift_ms: (f64, f64),
    pub freq_mask_bins: usize,
    /// Amplitude factor drawn from `[1 - amp_jitter, 1 + amp_jitter]`.
    pub amp_jitter: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            enabled: true,
            temporal_shift_ms: (50.0, 100.0),
            freq_mask_bins: 8,
            amp_jitter: 0.05,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec {
            enabled: false,
            ..Default::default()
        }
    }
}

/// Per-sample augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub shift: isize,
    pub gain: f64,
    /// Half-open frequency-bin band set to zero.
    pub mask: Option<(usize, usize)>,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        shift: 0,
        gain: 1.0,
        mask: None,
    };
}

/// Draws a shift whose magnitude lies in the configured range and inside
/// `margin`, a gain, and (for `n_freqs > 0`) a frequency mask.
pub fn draw_augment(spec: &AugmentSpec, sample_rate: f64, margin: usize, n_freqs: usize, rng: &mut impl Rng) -> Result<AugmentDraw> {
    if !spec.enabled {
        return Ok(AugmentDraw::IDENTITY);
    }
    let lo = (spec.temporal_shift_ms.0 * sample_rate / 1000.0).round() as usize;
    let hi = (spec.temporal_shift_ms.1 * sample_rate / 1000.0).round() as usize;
    if lo > hi {
        return Err(Error::Config(format!("shift range {:?} ms is empty", spec.temporal_shift_ms)));
    }
    let hi = hi.min(margin);
    if lo > hi {
        return Err(Error::Config(format!(
            "shift range {:?} ms does not fit the {}-sample margin",
            spec.temporal_shift_ms, margin
        )));
    }
    let mag = rng.gen_range(lo..=hi) as isize;
    let shift = if rng.gen_bool(0.5) { mag } else { -mag };
    let gain = 1.0 + rng.gen_range(-spec.amp_jitter..=spec.amp_jitter);
    let mask = if n_freqs > 0 && spec.freq_mask_bins > 0 {
        let w = rng.gen_range(1..=spec.freq_mask_bins.min(n_freqs));
        let start = rng.gen_range(0..=n_freqs - w);
        Some((start, start + w))
    } else {
        None
    };
    Ok(AugmentDraw { shift, gain, mask })
}

/// Zeroes frequency rows `band` of a `[S, F, T]` tensor in place.
pub fn apply_freq_mask(values: &mut [f32], n_freqs: usize, n_times: usize, band: (usize, usize)) {
    for sensor in values.chunks_mut(n_freqs * n_times) {
        sensor[band.0 * n_times..band.1 * n_times].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Model inputs addressed by sample index.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    fn sample_shape(&self) -> Vec<usize>;

    fn sample(&self, i: usize, aug: &AugmentDraw) -> Result<Vec<f32>>;

    /// Draws augmentation parameters suited to this source.
    fn draw(&self, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<AugmentDraw>;
}

/// Normalized scalograms `[S, F, T]` sliced from a CWT cache.
pub struct ScalogramSource<'a> {
    pub cache: &'a CwtCache,
}

impl BatchSource for ScalogramSource<'_> {
    fn len(&self) -> usize {
        self.cache.len()
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![
            self.cache.n_sensors(),
            self.cache.params.n_freqs,
            self.cache.layout.core_len,
        ]
    }

    fn sample(&self, i: usize, aug: &AugmentDraw) -> Result<Vec<f32>> {
        let sc = self.cache.scalogram_scaled(i, aug.shift, aug.gain as f32)?;
        let (nf, t) = (sc.values.shape()[1], sc.values.shape()[2]);
        let mut v = sc.values.into_vec();
        if let Some(band) = aug.mask {
            apply_freq_mask(&mut v, nf, t, band);
        }
        Ok(v)
    }

    fn draw(&self, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<AugmentDraw> {
        draw_augment(spec, self.cache.sample_rate, self.cache.layout.margin, self.cache.params.n_freqs, rng)
    }
}

/// Raw core windows `[1, S, T]` for EEGNet.
pub struct RawEpochSource<'a> {
    pub set: &'a EpochSet,
}

impl BatchSource for RawEpochSource<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn sample_shape(&self) -> Vec<usize> {
        let e = &self.set.epochs[0];
        vec![1, e.n_sensors(), e.layout.core_len]
    }

    fn sample(&self, i: usize, aug: &AugmentDraw) -> Result<Vec<f32>> {
        let e = self
            .set
            .epochs
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("epoch index {} out of {}", i, self.set.len())))?;
        Ok(e.core(aug.shift)?.data().iter().map(|&v| (v * aug.gain) as f32).collect())
    }

    fn draw(&self, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<AugmentDraw> {
        let margin = self.set.epochs.first().map_or(0, |e| e.layout.margin);
        draw_augment(spec, self.set.sample_rate, margin, 0, rng)
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`, with `t` clamped
/// to `T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);
    let t = if t > total {
        if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
            warn!("cosine schedule step {} beyond total {}; clamped", t, total);
        }
        total
    } else {
        t
    };
    if total == 0 {
        return lr_max;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Inverse class frequency, normalized to mean 1 over the classes present;
/// absent classes get weight 0.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::InvalidInput(format!("label {} outside {} classes", l, n_classes)))? += 1;
    }
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return Err(Error::InsufficientData("no labels for class weights".into()));
    }
    let mean = inv.iter().sum::<f64>() / present as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

/// Weighted sigmoid BCE (one logit) or weighted softmax CE.
pub fn weighted_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], class_weights: &[f64], head: HeadKind) -> Result<Var> {
    if class_weights.len() != head.n_classes() {
        return Err(Error::shape(
            "weighted_loss",
            format!("{} class weights for a {}-class head", class_weights.len(), head.n_classes()),
        ));
    }
    match head {
        HeadKind::BinarySigmoid => g.sigmoid_bce(logits, labels, class_weights),
        HeadKind::Softmax3 => g.softmax_cross_entropy(logits, labels, class_weights),
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &IndexMap<String, Array<T>>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut IndexMap<String, Array<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One AdamW step over every trainable parameter that has a gradient.
/// Decay `theta -= lr * wd * theta` applies to `Weight` parameters only,
/// before the bias-corrected moment update. `lr_of` gives each parameter's
/// learning rate.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &IndexMap<String, Array<T>>,
    state: &mut AdamState<T>,
    lr_of: impl Fn(&str) -> f64,
    config: &OptimConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                site: format!("gradient of {}", name),
                detail: "optimizer step aborted".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adamw_step", format!("{}: {:?} vs {:?}", name, g.shape(), p.value.shape())));
        }
        let lr = lr_of(name);
        let decay = if p.kind == ParamKind::Weight { lr * config.weight_decay } else { 0.0 };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let value = std::sync::Arc::make_mut(&mut p.value);
        for (((th, gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let mut x = th.as_f64();
            x -= decay * x;
            x -= lr * (mf / c1) / ((vf / c2).sqrt() + config.eps);
            *th = T::lit(x);
        }
        if let Some(limit) = p.max_norm {
            renorm_filters(value, limit);
        }
    }
    Ok(())
}

/// Rescales each output filter (leading-axis slice) to L2 norm at most
/// `limit`.
fn renorm_filters<T: Scalar>(w: &mut Array<T>, limit: f64) {
    let per = w.len() / w.shape()[0].max(1);
    for f in w.data_mut().chunks_mut(per.max(1)) {
        let n = f.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if n > limit {
            let s = T::lit(limit / n);
            f.iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epoch_losses: Vec<f64>,
    /// Head-group learning rate at every optimizer step.
    pub lr_trace: Vec<f64>,
    pub checkpoint_digest: String,
    pub seed: u64,
    pub steps: usize,
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.gen()
}

/// Assembles `[N, ...sample_shape]` for `indices` in order.
pub fn assemble_batch<T: Scalar>(source: &dyn BatchSource, indices: &[usize], draws: &[AugmentDraw]) -> Result<Array<T>> {
    let samples = indices
        .par_iter()
        .zip(draws)
        .map(|(&i, d)| source.sample(i, d))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = vec![indices.len()];
    shape.extend(source.sample_shape());
    let data: Vec<T> = samples.into_iter().flatten().map(|v| T::lit(v as f64)).collect();
    Array::from_vec(&shape, data)
}

/// Trains `store` in place on `train_idx` of `source` and returns the run
/// record. Augmentation draws come from a stream keyed by (epoch, sample).
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    store: &mut ParamStore<T>,
    source: &dyn BatchSource,
    labels: &[usize],
    train_idx: &[usize],
    optim: &OptimConfig,
    augment: &AugmentSpec,
) -> Result<TrainRun> {
    optim.validate()?;
    if train_idx.is_empty() {
        return Err(Error::InsufficientData("empty training fold".into()));
    }
    if labels.len() != source.len() {
        return Err(Error::InvalidInput(format!("{} labels for {} samples", labels.len(), source.len())));
    }
    let fold_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let weights = class_weights(&fold_labels, spec.head.n_classes())?;
    let per_epoch = train_idx.len().div_ceil(optim.batch_size);
    let total = per_epoch * optim.epochs;
    let mut state = AdamState::new();
    let mut order = train_idx.to_vec();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut run = TrainRun {
        epoch_losses: Vec::with_capacity(optim.epochs),
        lr_trace: Vec::with_capacity(total),
        checkpoint_digest: String::new(),
        seed: optim.seed,
        steps: 0,
    };
    for epoch in 0..optim.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(optim.batch_size) {
            let draws = batch
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(optim.seed, epoch as u64 + 1, i as u64));
                    source.draw(augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = assemble_batch::<T>(source, batch, &draws)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(true, derive_seed(optim.seed, 0, run.steps as u64));
            let xv = g.input(x, false);
            let logits = spec.forward(&mut g, store, xv)?;
            let loss = weighted_loss(&mut g, logits, &batch_labels, &weights, spec.head)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    site: "training loss".into(),
                    detail: format!("epoch {} batch samples {:?}", epoch, batch),
                });
            }
            let mut grads = g.backward(loss)?.into_params();
            clip_gradients(&mut grads, optim.clip_max_norm);
            let head_lr = cosine_lr(run.steps, total, optim.lr_head, 0.0);
            let body_lr = cosine_lr(run.steps, total, optim.lr_unfrozen, 0.0);
            adamw_step(store, &grads, &mut state, |n| if spec.is_head_group(n) { head_lr } else { body_lr }, optim)?;
            run.lr_trace.push(head_lr);
            run.steps += 1;
            loss_sum += lv * batch.len() as f64;
        }
        run.epoch_losses.push(loss_sum / train_idx.len() as f64);
    }
    run.checkpoint_digest = store.digest();
    Ok(run)
}

/// Evaluation-mode logits `[N, n_outputs]` for `indices`, without
/// augmentation.
pub fn predict_logits<T: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<T>,
    source: &dyn BatchSource,
    indices: &[usize],
    batch_size: usize,
) -> Result<Array<f64>> {
    let k = spec.head.n_outputs();
    let mut out = Vec::with_capacity(indices.len() * k);
    for batch in indices.chunks(batch_size.max(1)) {
        let draws = vec![AugmentDraw::IDENTITY; batch.len()];
        let x = assemble_batch::<T>(source, batch, &draws)?;
        let mut g = Graph::new(false, 0);
        let xv = g.input(x, false);
        let logits = spec.forward(&mut g, store, xv)?;
        out.extend(g.value(logits).data().iter().map(|v| v.as_f64()));
    }
    Array::from_vec(&[indices.len(), k], out)
}

/// Class decisions from logits: sign of the single logit, else argmax.
pub fn decide(logits: &Array<f64>) -> Vec<usize> {
    if logits.shape()[1] == 1 {
        logits.data().iter().map(|&z| usize::from(z > 0.0)).collect()
    } else {
        logits.argmax_rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonn::Array;

    fn one_param(kind: ParamKind, value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Array::from_vec(&[1], vec![value]).unwrap(), kind);
        s
    }

    fn grads(v: f64) -> IndexMap<String, Array<f64>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Array::from_vec(&[1], vec![v]).unwrap());
        g
    }

    #[test]
    fn decoupled_decay_by_hand() {
        let mut s = one_param(ParamKind::Weight, 1.0);
        let cfg = OptimConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut s, &grads(0.0), &mut AdamState::new(), |_| 0.1, &cfg).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_from_zero() {
        let mut s = one_param(ParamKind::Weight, 0.0);
        let cfg = OptimConfig::default();
        adamw_step(&mut s, &grads(1.0), &mut AdamState::new(), |_| 1e-3, &cfg).unwrap();
        // m_hat = 1, v_hat = 1.
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((s.value("w").unwrap().data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = one_param(ParamKind::Bias, 0.7);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &grads(0.0), &mut AdamState::new(), |_| 0.1, &cfg).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
        // Biases are never decayed.
        let cfg = OptimConfig::default();
        adamw_step(&mut s, &grads(0.0), &mut AdamState::new(), |_| 0.1, &cfg).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = one_param(ParamKind::Weight, 0.0);
        let r = adamw_step(&mut s, &grads(f64::NAN), &mut AdamState::new(), |_| 0.1, &OptimConfig::default());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-3, 0.0), cosine_lr(100, 100, 1e-3, 0.0));
    }

    #[test]
    fn clipping_examples() {
        let mut g = IndexMap::new();
        g.insert("a".to_string(), Array::from_vec(&[2], vec![3.0f64, 4.0]).unwrap());
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        let v = g["a"].data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let mut h = IndexMap::new();
        h.insert("a".to_string(), Array::from_vec(&[2], vec![0.3f64, 0.4]).unwrap());
        clip_gradients(&mut h, 1.0);
        assert_eq!(h["a"].data(), &[0.3, 0.4]);
    }

    #[test]
    fn class_weights_have_mean_one() {
        let w = class_weights(&[0, 0, 0, 1], 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
        assert!(class_weights(&[3], 2).is_err());
    }

    #[test]
    fn frequency_mask_zeroes_only_its_band() {
        let mut v: Vec<f32> = (0..2 * 5 * 3).map(|i| i as f32 + 1.0).collect();
        let orig = v.clone();
        apply_freq_mask(&mut v, 5, 3, (1, 3));
        for s in 0..2 {
            for f in 0..5 {
                for t in 0..3 {
                    let i = s * 15 + f * 3 + t;
                    if (1..3).contains(&f) {
                        assert_eq!(v[i], 0.0);
                    } else {
                        assert_eq!(v[i], orig[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn shift_draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let d = draw_augment(&AugmentSpec::default(), 500.0, 50, 96, &mut rng).unwrap();
            assert!((25..=50).contains(&d.shift.unsigned_abs()));
            assert!((0.95..=1.05).contains(&d.gain));
            let (a, b) = d.mask.unwrap();
            assert!(b > a && b - a <= 8 && b <= 96);
        }
        assert!(draw_augment(&AugmentSpec::default(), 500.0, 10, 96, &mut rng).is_err());
        assert_eq!(draw_augment(&AugmentSpec::disabled(), 500.0, 0, 96, &mut rng).unwrap(), AugmentDraw::IDENTITY);
    }
}

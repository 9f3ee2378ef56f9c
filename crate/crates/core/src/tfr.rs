//! Morlet continuous wavelet transform magnitudes and per-epoch baseline
//! z-scoring.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonn::{Array, Scalar};
use crate::error::{Error, Result};
use crate::preproc::{EpochLayout, EpochMeta, EpochSet};

pub const N_FREQS: usize = 96;

/// Wavelet support in Gaussian standard deviations on each side.
const SUPPORT_SIGMAS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletParams {
    pub n_freqs: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_cycles: f64,
}

impl Default for MorletParams {
    fn default() -> Self {
        MorletParams {
            n_freqs: N_FREQS,
            f_min: 1.0,
            f_max: 150.0,
            n_cycles: 7.0,
        }
    }
}

impl MorletParams {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.n_freqs < 2 || !(self.f_min > 0.0 && self.f_min < self.f_max) || !(self.n_cycles > 0.0) {
            return Err(Error::Config(format!("invalid Morlet parameters {:?}", self)));
        }
        if self.f_max >= sample_rate / 2.0 {
            return Err(Error::Config(format!(
                "f_max {} Hz must lie below Nyquist {} Hz",
                self.f_max,
                sample_rate / 2.0
            )));
        }
        Ok(())
    }

    /// `f_min * (f_max / f_min)^(k / (n_freqs - 1))`, endpoints exact.
    pub fn frequencies(&self) -> Vec<f64> {
        let last = self.n_freqs - 1;
        (0..self.n_freqs)
            .map(|k| match k {
                0 => self.f_min,
                k if k == last => self.f_max,
                k => self.f_min * (self.f_max / self.f_min).powf(k as f64 / last as f64),
            })
            .collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("params serialize")))
    }
}

/// Complex Morlet wavelet at `f` Hz sampled at `fs`, unit L2 norm, indexed
/// `-half..=half`.
pub fn morlet_wavelet(f: f64, fs: f64, n_cycles: f64, max_half: usize) -> Vec<Complex64> {
    let sigma = n_cycles / (2.0 * PI * f) * fs;
    let half = ((SUPPORT_SIGMAS * sigma).ceil() as usize).min(max_half);
    let w0 = 2.0 * PI * f / fs;
    let mut w: Vec<Complex64> = (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            Complex64::from_polar((-t * t / (2.0 * sigma * sigma)).exp(), w0 * t)
        })
        .collect();
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    w.iter_mut().for_each(|c| *c /= norm);
    w
}

/// Precomputed wavelet spectra for signals of one fixed length.
pub struct CwtPlan {
    n: usize,
    nfft: usize,
    kernels: Vec<Vec<Complex64>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl CwtPlan {
    pub fn new(params: &MorletParams, sample_rate: f64, n: usize) -> Result<Self> {
        params.validate(sample_rate)?;
        if n < 2 {
            return Err(Error::InvalidInput(format!("CWT needs at least 2 samples, got {}", n)));
        }
        let freqs = params.frequencies();
        let wavelets: Vec<Vec<Complex64>> = freqs
            .iter()
            .map(|&f| morlet_wavelet(f, sample_rate, params.n_cycles, n - 1))
            .collect();
        let max_half = wavelets.iter().map(|w| w.len() / 2).max().unwrap_or(0);
        let nfft = (n + max_half).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);
        let ifft = planner.plan_fft_inverse(nfft);
        let kernels = wavelets
            .into_iter()
            .map(|w| {
                let half = w.len() / 2;
                let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
                for (i, c) in w.into_iter().enumerate() {
                    // Tap at lag (i - half) lands at that index modulo nfft.
                    buf[(i + nfft - half) % nfft] = c;
                }
                fft.process(&mut buf);
                buf
            })
            .collect();
        Ok(CwtPlan {
            n,
            nfft,
            kernels,
            fft,
            ifft,
        })
    }

    pub fn n_freqs(&self) -> usize {
        self.kernels.len()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Same-length magnitudes `|x * psi_f|`, written row-major `[freq, time]`
    /// into `out`.
    pub fn magnitudes_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.n || out.len() != self.n * self.n_freqs() {
            return Err(Error::shape(
                "morlet_cwt",
                format!("signal {} / output {} for plan length {}", x.len(), out.len(), self.n),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                site: "morlet_cwt".into(),
                detail: "input signal".into(),
            });
        }
        let mut spec = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (s, &v) in spec.iter_mut().zip(x) {
            s.re = v;
        }
        self.fft.process(&mut spec);
        let scale = 1.0 / self.nfft as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (kernel, row) in self.kernels.iter().zip(out.chunks_mut(self.n)) {
            for ((b, s), k) in buf.iter_mut().zip(&spec).zip(kernel) {
                *b = s * k;
            }
            self.ifft.process(&mut buf);
            for (o, b) in row.iter_mut().zip(&buf) {
                *o = b.norm() * scale;
            }
        }
        Ok(())
    }

    pub fn magnitudes(&self, x: &[f64]) -> Result<Array<f64>> {
        let mut out = vec![0.0; self.n * self.n_freqs()];
        self.magnitudes_into(x, &mut out)?;
        Array::from_vec(&[self.n_freqs(), self.n], out)
    }
}

/// Magnitude scalogram `[n_freqs, T]` of one channel.
pub fn morlet_cwt(signal: &[f64], sample_rate: f64, params: &MorletParams) -> Result<Array<f64>> {
    CwtPlan::new(params, sample_rate, signal.len())?.magnitudes(signal)
}

/// Smallest baseline SD used as a divisor for an epoch whose largest
/// magnitude is `max_magnitude`.
pub fn sigma_floor(max_magnitude: f64) -> f64 {
    (1e-12 * max_magnitude).max(f64::MIN_POSITIVE)
}

/// Z-scores every time row of `values` (last axis is time) against the mean
/// and population SD of its `baseline` samples. SDs below `floor` are
/// replaced by `floor`.
pub fn zscore_rows<T: Scalar>(values: &mut [T], row_len: usize, baseline: Range<usize>, floor: f64) -> Result<()> {
    if baseline.is_empty() || baseline.end > row_len || row_len == 0 {
        return Err(Error::InvalidInput(format!(
            "baseline {:?} empty or outside rows of {} samples",
            baseline, row_len
        )));
    }
    let nb = baseline.len() as f64;
    for row in values.chunks_mut(row_len) {
        let base = &row[baseline.clone()];
        let mean = base.iter().map(|v| v.as_f64()).sum::<f64>() / nb;
        let var = base.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / nb;
        let inv = 1.0 / var.sqrt().max(floor);
        for v in row.iter_mut() {
            *v = T::lit((v.as_f64() - mean) * inv);
        }
    }
    Ok(())
}

/// Array form of [`zscore_rows`] with the floor derived from the array's
/// largest magnitude.
pub fn zscore_baseline<T: Scalar>(values: &Array<T>, baseline: Range<usize>) -> Result<Array<T>> {
    let t = *values
        .shape()
        .last()
        .ok_or_else(|| Error::shape("zscore_baseline", "scalar input"))?;
    let max = values.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let mut out = values.clone();
    zscore_rows(out.data_mut(), t, baseline, sigma_floor(max))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    /// [n_sensors, n_freqs, T]
    pub values: Array<f32>,
    pub meta: EpochMeta,
    pub normalized: bool,
}

struct CachedEpoch {
    meta: EpochMeta,
    /// [n_sensors, n_freqs, layout.total_len()]
    magnitudes: Array<f32>,
    floor: f64,
}

/// CWT magnitudes of every epoch's full margin buffer. Scalograms for any
/// shift inside the margin are slices of this cache.
pub struct CwtCache {
    pub params: MorletParams,
    pub sample_rate: f64,
    pub layout: EpochLayout,
    entries: Vec<CachedEpoch>,
}

impl CwtCache {
    pub fn build(set: &EpochSet, params: &MorletParams) -> Result<Self> {
        let first = set
            .epochs
            .first()
            .ok_or_else(|| Error::InsufficientData("no epochs to transform".into()))?;
        set.check_consistent()?;
        let layout = first.layout;
        let l = layout.total_len();
        let plan = CwtPlan::new(params, set.sample_rate, l)?;
        let nf = plan.n_freqs();
        let entries = set
            .epochs
            .par_iter()
            .map(|e| {
                let s = e.n_sensors();
                let mut mags = vec![0.0f64; s * nf * l];
                for (x, out) in e.data.data().chunks(l).zip(mags.chunks_mut(nf * l)) {
                    plan.magnitudes_into(x, out)?;
                }
                let max = mags.iter().fold(0.0f64, |m, &v| m.max(v));
                Ok(CachedEpoch {
                    meta: e.meta.clone(),
                    magnitudes: Array::from_vec(&[s, nf, l], mags.into_iter().map(|v| v as f32).collect())?,
                    floor: sigma_floor(max),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CwtCache {
            params: *params,
            sample_rate: set.sample_rate,
            layout,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.entries.first().map_or(0, |e| e.magnitudes.shape()[0])
    }

    pub fn meta(&self, i: usize) -> &EpochMeta {
        &self.entries[i].meta
    }

    pub fn metas(&self) -> impl Iterator<Item = &EpochMeta> {
        self.entries.iter().map(|e| &e.meta)
    }

    pub fn memory_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.magnitudes.len() * 4).sum()
    }

    /// Normalized scalogram of epoch `i`: the analysis segment starting
    /// `shift` samples after its unshifted position, z-scored against its
    /// first `baseline_len` samples, cropped to the core window.
    pub fn scalogram(&self, i: usize, shift: isize) -> Result<Scalogram> {
        self.scalogram_scaled(i, shift, 1.0)
    }

    /// As [`CwtCache::scalogram`] for the epoch multiplied by `gain > 0`
    /// before the transform.
    pub fn scalogram_scaled(&self, i: usize, shift: isize, gain: f32) -> Result<Scalogram> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::InvalidInput(format!("amplitude gain {} must be positive", gain)));
        }
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("epoch index {} out of {}", i, self.entries.len())))?;
        let lay = self.layout;
        if shift.unsigned_abs() > lay.margin {
            return Err(Error::InvalidInput(format!("shift {} exceeds margin {}", shift, lay.margin)));
        }
        let (s, nf, l) = (entry.magnitudes.shape()[0], entry.magnitudes.shape()[1], lay.total_len());
        let start = (lay.margin as isize + shift) as usize;
        let mut seg = vec![0.0f32; lay.analysis_len];
        let mut out = Vec::with_capacity(s * nf * lay.core_len);
        for row in entry.magnitudes.data().chunks(l) {
            seg.copy_from_slice(&row[start..start + lay.analysis_len]);
            if gain != 1.0 {
                seg.iter_mut().for_each(|v| *v *= gain);
            }
            zscore_rows(&mut seg, lay.analysis_len, 0..lay.baseline_len, entry.floor * gain as f64)?;
            out.extend_from_slice(&seg[lay.core_offset..lay.core_offset + lay.core_len]);
        }
        let values = Array::from_vec(&[s, nf, lay.core_len], out)?;
        if !values.all_finite() {
            return Err(Error::NonFinite {
                site: "scalogram".into(),
                detail: format!("epoch {} shift {}", i, shift),
            });
        }
        Ok(Scalogram {
            values,
            meta: entry.meta.clone(),
            normalized: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 500.0;

    fn sine(f: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / FS).sin()).collect()
    }

    #[test]
    fn grid_endpoints_exact() {
        let f = MorletParams::default().frequencies();
        assert_eq!(f.len(), 96);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[95], 150.0);
        let mid = 150f64.powf(40.0 / 95.0);
        assert!((f[40] - mid).abs() <= 1e-12 * mid);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let m = morlet_cwt(&[0.0; 400], FS, &MorletParams::default()).unwrap();
        assert_eq!(m.shape(), &[96, 400]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_hz_ridge() {
        let p = MorletParams::default();
        let m = morlet_cwt(&sine(10.0, 400, 1.0), FS, &p).unwrap();
        let col: Vec<f64> = (0..96).map(|k| m.data()[k * 400 + 200]).collect();
        let ridge = col.iter().enumerate().fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
        let nearest = (95.0 * 10f64.ln() / 150f64.ln()).round() as usize;
        assert_eq!(nearest, 44);
        // The unit-L2 wavelets weigh an off-grid tone slightly toward the
        // lower neighbour.
        assert_eq!(ridge, 43);
        assert!((ridge as isize - nearest as isize).abs() <= 1);
    }

    #[test]
    fn magnitudes_scale_with_amplitude() {
        let p = MorletParams::default();
        let x = sine(23.0, 300, 1.0);
        let a = morlet_cwt(&x, FS, &p).unwrap();
        let b = morlet_cwt(&x.iter().map(|v| 3.5 * v).collect::<Vec<_>>(), FS, &p).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((3.5 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = vec![0.0; 100];
        x[3] = f64::NAN;
        assert!(matches!(morlet_cwt(&x, FS, &MorletParams::default()), Err(Error::NonFinite { .. })));
        assert!(morlet_cwt(&[1.0], FS, &MorletParams::default()).is_err());
    }

    #[test]
    fn wavelets_have_unit_norm() {
        for f in MorletParams::default().frequencies() {
            let w = morlet_wavelet(f, FS, 7.0, 10_000);
            let n: f64 = w.iter().map(|c| c.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 50).map(|_| rng.gen_range(0.0..4.0)).collect();
        let mut a = Array::from_vec(&[3, 50], data).unwrap();
        a.data_mut()[100..150].iter_mut().for_each(|v| *v = 2.5);
        let z = zscore_baseline(&a, 0..20).unwrap();
        for (r, row) in z.data().chunks(50).enumerate() {
            let (m, sd) = crate::imagerep::mean_sd(&row[..20]);
            assert!(m.abs() <= 1e-6);
            if r < 2 {
                assert!((sd - 1.0).abs() <= 1e-6);
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
        let shifted = a.map(|v| v + 7.0);
        let z2 = zscore_baseline(&shifted, 0..20).unwrap();
        for (u, v) in z.data()[..100].iter().zip(&z2.data()[..100]) {
            assert!((u - v).abs() < 1e-9);
        }
        assert!(zscore_baseline(&a, 5..5).is_err());
        assert!(zscore_baseline(&a, 0..51).is_err());
    }
}

//! IIR filter design (Butterworth, notch) and zero-phase application as
//! cascaded second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autonn::Array;
use crate::error::{Error, Result};

/// One biquad `[b0, b1, b2, a1, a2]` with `a0 = 1`.
pub type Sos = [f64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub notch_freqs: Vec<f64>,
    pub notch_q: f64,
    pub band: (f64, f64),
    pub highpass_order: usize,
    pub lowpass_order: usize,
    pub zero_phase: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            notch_freqs: vec![50.0, 100.0, 150.0],
            notch_q: 30.0,
            band: (0.5, 150.0),
            highpass_order: 4,
            lowpass_order: 14,
            zero_phase: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pass {
    Low,
    High,
}

fn butterworth(order: usize, cutoff: f64, fs: f64, pass: Pass) -> Result<Vec<Sos>> {
    let nyq = fs / 2.0;
    if order == 0 || !(cutoff > 0.0 && cutoff < nyq) {
        return Err(Error::Config(format!(
            "Butterworth order {} cutoff {} Hz invalid below Nyquist {} Hz",
            order, cutoff, nyq
        )));
    }
    let k = 2.0 * fs;
    let warped = k * (PI * cutoff / fs).tan();
    let n = order as f64;
    // Bilinear images of the analog poles in the upper half plane (plus the
    // real pole for odd orders).
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order.div_ceil(2) {
        let theta = PI * (2.0 * i as f64 + n + 1.0) / (2.0 * n);
        let proto = Complex64::from_polar(1.0, theta);
        let s = match pass {
            Pass::Low => proto * warped,
            Pass::High => Complex64::new(warped, 0.0) / proto,
        };
        let z = (k + s) / (k - s);
        let zero_sign = if pass == Pass::Low { 1.0 } else { -1.0 };
        let real_pole = 2 * i + 1 == order;
        let (mut b, a) = if real_pole {
            ([1.0, zero_sign, 0.0], [-z.re, 0.0])
        } else {
            ([1.0, 2.0 * zero_sign, 1.0], [-2.0 * z.re, z.norm_sqr()])
        };
        // Unit gain at DC (low-pass) or Nyquist (high-pass).
        let x = if pass == Pass::Low { 1.0 } else { -1.0 };
        let num = b[0] + b[1] * x + b[2] * x * x;
        let den = 1.0 + a[0] * x + a[1] * x * x;
        let g = den / num;
        b.iter_mut().for_each(|v| *v *= g);
        sections.push([b[0], b[1], b[2], a[0], a[1]]);
    }
    Ok(sections)
}

pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Sos>> {
    butterworth(order, cutoff, fs, Pass::Low)
}

pub fn butter_highpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Sos>> {
    butterworth(order, cutoff, fs, Pass::High)
}

/// Second-order IIR notch with quality factor `q` (-3 dB bandwidth `f0 / q`).
pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
    if !(f0 > 0.0 && f0 < fs / 2.0) || q <= 0.0 {
        return Err(Error::Config(format!(
            "notch at {} Hz (Q {}) must lie strictly below Nyquist {} Hz",
            f0,
            q,
            fs / 2.0
        )));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok([gain, -2.0 * gain * c, gain, -2.0 * gain * c, 2.0 * gain - 1.0])
}

/// Magnitude response of a cascade at `f` Hz.
pub fn response(sos: &[Sos], f: f64, fs: f64) -> f64 {
    let z = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
    sos.iter()
        .map(|s| {
            let num = s[0] + s[1] * z + s[2] * z * z;
            let den = 1.0 + s[3] * z + s[4] * z * z;
            (num / den).norm()
        })
        .product()
}

/// Causal transposed direct-form II cascade, in place. `zi` holds the
/// initial state of every section and is updated.
fn sosfilt_inplace(sos: &[Sos], x: &mut [f64], zi: &mut [[f64; 2]]) {
    for (s, z) in sos.iter().zip(zi.iter_mut()) {
        let [b0, b1, b2, a1, a2] = *s;
        let (mut z0, mut z1) = (z[0], z[1]);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z0;
            z0 = b1 * xin - a1 * y + z1;
            z1 = b2 * xin - a2 * y;
            *v = y;
        }
        *z = [z0, z1];
    }
}

/// Per-section states giving a steady-state response to a unit step.
fn step_state(sos: &[Sos]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2, a1, a2] = *s;
            let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let z = [scale * (g - b0), scale * (b2 - a2 * g)];
            scale *= g;
            z
        })
        .collect()
}

pub fn sosfilt(sos: &[Sos], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut zi = vec![[0.0; 2]; sos.len()];
    sosfilt_inplace(sos, &mut y, &mut zi);
    y
}

/// Zero-phase forward-backward filtering with mirror-symmetric edge extension
/// of `pad` samples (clamped to `len - 1`) and steady-state initial conditions.
pub fn sosfiltfilt(sos: &[Sos], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n < 2 || sos.is_empty() {
        return x.to_vec();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| x[n - 1 - i]));
    let base = step_state(sos);
    let mut zi: Vec<[f64; 2]> = base.iter().map(|z| [z[0] * ext[0], z[1] * ext[0]]).collect();
    sosfilt_inplace(sos, &mut ext, &mut zi);
    ext.reverse();
    let mut zi: Vec<[f64; 2]> = base.iter().map(|z| [z[0] * ext[0], z[1] * ext[0]]).collect();
    sosfilt_inplace(sos, &mut ext, &mut zi);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Edge extension used for zero-phase filtering: three seconds.
fn default_pad(fs: f64) -> usize {
    (3.0 * fs) as usize
}

fn apply_rows(signal: &Array<f64>, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Result<Array<f64>> {
    let s = signal.shape();
    if s.len() != 2 {
        return Err(Error::shape("filter", format!("expected [sensors, samples], got {:?}", s)));
    }
    if !signal.all_finite() {
        return Err(Error::NonFinite {
            site: "filter".into(),
            detail: "input signal".into(),
        });
    }
    let n = s[1];
    let rows: Vec<Vec<f64>> = signal.data().par_chunks(n.max(1)).map(&f).collect();
    Array::from_vec(s, rows.concat())
}

fn run(sos: &[Sos], x: &[f64], fs: f64, zero_phase: bool) -> Vec<f64> {
    if zero_phase {
        sosfiltfilt(sos, x, default_pad(fs))
    } else {
        sosfilt(sos, x)
    }
}

pub fn notch_bank(notch_freqs: &[f64], q: f64, fs: f64) -> Result<Vec<Sos>> {
    notch_freqs.iter().map(|&f| notch(f, q, fs)).collect()
}

/// Cascade of notches at `notch_freqs`, applied forward-backward to every row.
pub fn apply_notch_bank(signal: &Array<f64>, sample_rate: f64, notch_freqs: &[f64]) -> Result<Array<f64>> {
    let sos = notch_bank(notch_freqs, FilterSpec::default().notch_q, sample_rate)?;
    apply_rows(signal, |x| run(&sos, x, sample_rate, true))
}

pub fn bandpass_sos(spec: &FilterSpec, fs: f64) -> Result<Vec<Sos>> {
    let (lo, hi) = spec.band;
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::Config(format!(
            "band ({}, {}) Hz must satisfy 0 < low < high < Nyquist {} Hz",
            lo,
            hi,
            fs / 2.0
        )));
    }
    let mut sos = butter_highpass(spec.highpass_order, lo, fs)?;
    sos.extend(butter_lowpass(spec.lowpass_order, hi, fs)?);
    Ok(sos)
}

/// High-pass at `band.0` cascaded with low-pass at `band.1`, forward-backward.
pub fn apply_bandpass(signal: &Array<f64>, sample_rate: f64, band: (f64, f64)) -> Result<Array<f64>> {
    let spec = FilterSpec {
        band,
        ..Default::default()
    };
    let sos = bandpass_sos(&spec, sample_rate)?;
    apply_rows(signal, |x| run(&sos, x, sample_rate, true))
}

/// Notch bank then band-pass, per `spec`.
pub fn apply_filters(signal: &Array<f64>, sample_rate: f64, spec: &FilterSpec) -> Result<Array<f64>> {
    let mut sos = notch_bank(&spec.notch_freqs, spec.notch_q, sample_rate)?;
    sos.extend(bandpass_sos(spec, sample_rate)?);
    apply_rows(signal, |x| run(&sos, x, sample_rate, spec.zero_phase))
}

/// Keeps every even-indexed sample: `ceil(n / 2)` outputs. Content above the
/// new Nyquist must already be removed.
pub fn decimate_2x(signal: &Array<f64>) -> Result<Array<f64>> {
    let s = signal.shape();
    if s.len() != 2 {
        return Err(Error::shape("decimate_2x", format!("expected [sensors, samples], got {:?}", s)));
    }
    let n = s[1];
    let m = n.div_ceil(2);
    let data: Vec<f64> = signal
        .data()
        .chunks(n.max(1))
        .flat_map(|row| row.iter().step_by(2).copied())
        .collect();
    Array::from_vec(&[s[0], m], data)
}

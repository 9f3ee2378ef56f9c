use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalodeck::autonn::Array;
use scalodeck::preproc::{extract_epochs, EpochOptions, WindowKind};
use scalodeck::synthgen::{generate_recording, ParadigmConfig};
use scalodeck::tfr::{morlet_cwt, zscore_baseline, CwtCache, MorletParams};

const FS: f64 = 500.0;

/// Direct "same"-mode convolution with an independently built wavelet
/// (Gaussian envelope, 5 SD support clipped to the signal length).
fn direct_cwt(x: &[f64], f: f64, n_cycles: f64) -> Vec<f64> {
    let n = x.len() as isize;
    let sigma = n_cycles / (2.0 * PI * f) * FS;
    let half = ((5.0 * sigma).ceil() as isize).min(n - 1);
    let taps: Vec<Complex64> = (-half..=half)
        .map(|t| {
            let t = t as f64;
            Complex64::new(0.0, 2.0 * PI * f * t / FS).exp() * (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm = taps.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    (0..n)
        .map(|t| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in -half..=half {
                let j = t - k;
                if (0..n).contains(&j) {
                    acc += taps[(k + half) as usize] * x[j as usize];
                }
            }
            acc.norm() / norm
        })
        .collect()
}

#[test]
fn fft_path_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..250).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = MorletParams::default();
    let m = morlet_cwt(&x, FS, &p).unwrap();
    let freqs = p.frequencies();
    for k in [0, 17, 44, 70, 95] {
        let oracle = direct_cwt(&x, freqs[k], 7.0);
        let row = &m.data()[k * 250..(k + 1) * 250];
        for (a, b) in row.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "bin {}: {} vs {}", k, a, b);
        }
    }
}

#[test]
fn ridge_at_random_grid_frequencies() {
    let p = MorletParams::default();
    let freqs = p.frequencies();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 400;
    for k in sample(&mut rng, 96, 10).into_iter() {
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freqs[k] * i as f64 / FS).sin()).collect();
        let m = morlet_cwt(&x, FS, &p).unwrap();
        let avg: Vec<f64> = m.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let ridge = avg.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        assert_eq!(ridge, k, "grid bin {} ({} Hz)", k, freqs[k]);
    }
}

#[test]
fn time_reversal_reverses_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    let p = MorletParams::default();
    let a = morlet_cwt(&x, FS, &p).unwrap();
    let b = morlet_cwt(&rev, FS, &p).unwrap();
    for (ra, rb) in a.data().chunks(150).zip(b.data().chunks(150)) {
        for (u, v) in ra.iter().zip(rb.iter().rev()) {
            assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()));
        }
    }
}

#[test]
fn cache_scalograms_are_shifted_slices() {
    let config = ParadigmConfig::desk_scale(4);
    let rec = generate_recording(&config, 0).unwrap();
    let rec = scalodeck::preproc::preprocess_recording(&rec, &Default::default()).unwrap();
    let mut set = extract_epochs(&rec, WindowKind::PostCue, &EpochOptions::default()).unwrap();
    set.epochs.truncate(3);
    let p = MorletParams::default();
    let cache = CwtCache::build(&set, &p).unwrap();
    let lay = cache.layout;
    assert_eq!(lay.core_len, 250);

    let e = &set.epochs[1];
    let l = lay.total_len();
    for shift in [-50isize, 0, 25] {
        let sc = cache.scalogram(1, shift).unwrap();
        assert_eq!(sc.values.shape(), &[e.n_sensors(), 96, 250]);
        assert!(sc.normalized);
        // Oracle: transform the full buffer, slice, z-score, crop.
        let row = &e.data.data()[2 * l..3 * l];
        let full = morlet_cwt(row, FS, &p).unwrap();
        let start = (lay.margin as isize + shift) as usize;
        let seg: Vec<f64> = full
            .data()
            .chunks(l)
            .flat_map(|r| r[start..start + lay.analysis_len].iter().map(|&v| v as f32 as f64))
            .collect();
        let seg = Array::from_vec(&[96, lay.analysis_len], seg).unwrap();
        let z = zscore_baseline(&seg, 0..lay.baseline_len).unwrap();
        let got = &sc.values.data()[2 * 96 * 250..3 * 96 * 250];
        for (f, grow) in got.chunks(250).enumerate() {
            let want = &z.data()[f * lay.analysis_len + lay.core_offset..][..250];
            for (a, b) in grow.iter().zip(want) {
                assert!((*a as f64 - b).abs() <= 1e-3 * (1.0 + b.abs()), "bin {} shift {}", f, shift);
            }
        }
    }
    let a = cache.scalogram(1, 25).unwrap();
    let b = cache.scalogram(1, 0).unwrap();
    assert_ne!(a.values, b.values);
    assert!(cache.scalogram(1, 51).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zscored_baseline_has_zero_mean_unit_sd(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 40), 1..4),
        nb in 5usize..40,
        c in -5.0f64..5.0,
    ) {
        let r = rows.len();
        let a = Array::from_vec(&[r, 40], rows.concat()).unwrap();
        let z = zscore_baseline(&a, 0..nb).unwrap();
        let zc = zscore_baseline(&a.map(|v| v + c), 0..nb).unwrap();
        for (row, rowc) in z.data().chunks(40).zip(zc.data().chunks(40)) {
            let base = &row[..nb];
            let m = base.iter().sum::<f64>() / nb as f64;
            let sd = (base.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nb as f64).sqrt();
            prop_assert!(m.abs() <= 1e-6);
            prop_assert!((sd - 1.0).abs() <= 1e-6);
            for (u, v) in row.iter().zip(rowc) {
                prop_assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn cwt_is_homogeneous(a in 0.01f64..100.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = MorletParams::default();
        let m = morlet_cwt(&x, FS, &p).unwrap();
        let ma = morlet_cwt(&x.iter().map(|v| a * v).collect::<Vec<_>>(), FS, &p).unwrap();
        for (u, v) in m.data().iter().zip(ma.data()) {
            prop_assert!((a * u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }
}

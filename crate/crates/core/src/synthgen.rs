//! Seeded synthetic MEG-like recordings following a read-then-imagine
//! sentence paradigm.
//!
//! Each trial is a rest interval, a silent-reading (SR) segment and, after a
//! short gap, an imagined-speech (ISP) segment over the same syllables. Class
//! content is carried by Gaussian-windowed oscillatory bursts on latent
//! sources that are mixed into the sensors by a subject-specific matrix.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonn::{Array, ArchiveTensor, TensorArchive};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: f64 = 1000.0;
pub const SYLLABLE_MS: usize = 400;
pub const LINE_FREQS: [f64; 3] = [50.0, 100.0, 150.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Isp,
    Sr,
    Silence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vowel {
    A,
    E,
    I,
}

impl Vowel {
    pub const ALL: [Vowel; 3] = [Vowel::A, Vowel::E, Vowel::I];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub n_subjects: usize,
    pub blocks_per_subject: usize,
    pub sentences_per_block: usize,
    pub syllable_duration_ms: usize,
    /// Inclusive range of syllables per sentence.
    pub syllables_per_sentence: (usize, usize),
    pub n_sensors: usize,
    pub sample_rate: f64,
    pub seed: u64,
    /// Weight of the population-common mixing matrix in every subject's mixing.
    pub shared_fraction: f64,
    pub noise_scale: f64,
}

impl Default for ParadigmConfig {
    fn default() -> Self {
        ParadigmConfig {
            n_subjects: 21,
            blocks_per_subject: 3,
            sentences_per_block: 34,
            syllable_duration_ms: SYLLABLE_MS,
            syllables_per_sentence: (6, 11),
            n_sensors: 16,
            sample_rate: SAMPLE_RATE,
            seed: 0,
            shared_fraction: 0.4,
            noise_scale: 1.0,
        }
    }
}

impl ParadigmConfig {
    /// Small dataset for quick runs: 6 subjects, 2 blocks of 12 sentences.
    pub fn desk_scale(seed: u64) -> Self {
        ParadigmConfig {
            n_subjects: 6,
            blocks_per_subject: 2,
            sentences_per_block: 12,
            seed,
            ..Default::default()
        }
    }

    /// Dimensions of the original study: 21 subjects, 3 x 34 sentences, 248 sensors.
    pub fn paper_scale(seed: u64) -> Self {
        ParadigmConfig {
            n_sensors: 248,
            seed,
            ..Default::default()
        }
    }

    pub fn trials_per_subject(&self) -> usize {
        self.blocks_per_subject * self.sentences_per_block
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be at least 1".into());
        }
        if self.blocks_per_subject == 0 || self.sentences_per_block == 0 {
            return fail("blocks_per_subject and sentences_per_block must be at least 1".into());
        }
        if self.n_sensors < 4 {
            return fail(format!("n_sensors must be at least 4, got {}", self.n_sensors));
        }
        if self.sample_rate != SAMPLE_RATE {
            return fail(format!("sample_rate must be {} Hz, got {}", SAMPLE_RATE, self.sample_rate));
        }
        if self.syllable_duration_ms != SYLLABLE_MS {
            return fail(format!("syllable_duration_ms must be {}, got {}", SYLLABLE_MS, self.syllable_duration_ms));
        }
        let (lo, hi) = self.syllables_per_sentence;
        if lo == 0 || lo > hi {
            return fail(format!("invalid syllable range {}..={}", lo, hi));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return fail(format!("shared_fraction {} outside [0, 1]", self.shared_fraction));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale must be finite and non-negative, got {}", self.noise_scale));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// A Gaussian-windowed sinusoid on one latent source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub source: usize,
    pub freq_hz: f64,
    pub amplitude: f64,
}

/// Latent-source content of each condition, plus the noise mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub n_sources: usize,
    /// Shared by every ISP syllable.
    pub common: Burst,
    /// Scale of the common burst during silent reading.
    pub sr_scale: f64,
    /// Vowel-specific bursts, indexed by [`Vowel::index`].
    pub vowels: [Burst; 3],
    /// Burst centered before the ISP cue.
    pub preparatory: Option<Burst>,
    pub preparatory_center_ms: f64,
    pub burst_sigma_ms: f64,
    pub white_rms: f64,
    pub pink_rms: f64,
    pub line_amplitude: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        SignalModel {
            n_sources: 4,
            common: Burst {
                source: 0,
                freq_hz: 15.0,
                amplitude: 1.0,
            },
            sr_scale: 0.6,
            vowels: [
                Burst {
                    source: 1,
                    freq_hz: 11.0,
                    amplitude: 1.6,
                },
                Burst {
                    source: 2,
                    freq_hz: 22.0,
                    amplitude: 1.6,
                },
                Burst {
                    source: 3,
                    freq_hz: 38.0,
                    amplitude: 1.6,
                },
            ],
            preparatory: Some(Burst {
                source: 0,
                freq_hz: 6.0,
                amplitude: 0.3,
            }),
            preparatory_center_ms: -150.0,
            burst_sigma_ms: 80.0,
            white_rms: 1.0,
            pink_rms: 1.0,
            line_amplitude: 0.5,
        }
    }
}

impl SignalModel {
    fn validate(&self) -> Result<()> {
        let bursts = self.vowels.iter().chain(std::iter::once(&self.common)).chain(self.preparatory.iter());
        for b in bursts {
            if b.source >= self.n_sources {
                return Err(Error::Config(format!("burst source {} >= {} sources", b.source, self.n_sources)));
            }
        }
        if self.burst_sigma_ms <= 0.0 {
            return Err(Error::Config("burst_sigma_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    /// [n_sensors, n_sources]
    pub spatial_mixing: Array<f64>,
    pub shared_fraction: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub sample: usize,
    pub trial_id: u64,
    pub condition: Condition,
    pub vowel: Option<Vowel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRecording {
    pub subject_id: usize,
    /// [n_sensors, n_samples]
    pub signal: Array<f64>,
    pub sample_rate: f64,
    pub events: Vec<Event>,
    /// Half-open sample ranges of inter-trial rest.
    pub rests: Vec<(usize, usize)>,
}

/// Identifier of trial `index` of `subject`.
pub fn trial_id(subject: usize, index: usize) -> u64 {
    subject as u64 * 10_000 + index as u64
}

/// Identifier of the Silence pseudo-trial cut from rest interval `index`.
pub fn silence_trial_id(subject: usize, index: usize) -> u64 {
    subject as u64 * 10_000 + 5_000 + index as u64
}

impl ContinuousRecording {
    pub fn n_sensors(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.signal.shape()[1]
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.subject_id as u64).to_le_bytes());
        h.update(self.sample_rate.to_le_bytes());
        for v in self.signal.data() {
            h.update(v.to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.events).expect("events serialize"));
        h.update(serde_json::to_vec(&self.rests).expect("rests serialize"));
        hex::encode(h.finalize())
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert("signal", ArchiveTensor::from_array(&self.signal));
        a.metadata.insert("subject_id".into(), self.subject_id.to_string());
        a.metadata.insert("sample_rate".into(), self.sample_rate.to_string());
        a
    }

    /// JSON sidecar with the event list and rest intervals.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "subject_id": self.subject_id,
            "sample_rate": self.sample_rate,
            "n_sensors": self.n_sensors(),
            "n_samples": self.n_samples(),
            "events": self.events,
            "rests": self.rests,
            "digest": self.digest(),
        })
    }

    pub fn from_parts(archive: &TensorArchive, manifest: &serde_json::Value) -> Result<Self> {
        let signal = archive
            .get("signal")
            .ok_or_else(|| Error::MissingTensor("signal".into()))?
            .to_array::<f64>();
        if signal.ndim() != 2 {
            return Err(Error::shape("ContinuousRecording::from_parts", format!("signal {:?}", signal.shape())));
        }
        let field = |k: &str| manifest.get(k).cloned().ok_or_else(|| Error::InvalidInput(format!("manifest lacks `{}`", k)));
        Ok(ContinuousRecording {
            subject_id: serde_json::from_value(field("subject_id")?)?,
            sample_rate: serde_json::from_value(field("sample_rate")?)?,
            events: serde_json::from_value(field("events")?)?,
            rests: serde_json::from_value(field("rests")?)?,
            signal,
        })
    }
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn column_rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let mat = DMatrix::from_row_slice(rows, cols, m);
    mat.rank(1e-9 * rows.max(cols) as f64)
}

/// Subject mixing: `shared_fraction` of a population matrix (shared across
/// subjects for the same seed) plus the remainder of a subject-random one.
pub fn subject_profile(config: &ParadigmConfig, model: &SignalModel, subject: usize) -> Result<SubjectProfile> {
    config.validate()?;
    model.validate()?;
    let (s, k) = (config.n_sensors, model.n_sources);
    if s < k {
        return Err(Error::Config(format!("{} sensors cannot carry {} independent sources", s, k)));
    }
    let mut pop_rng = subject_rng(config.seed, usize::MAX - 1);
    let population = gaussian_matrix(&mut pop_rng, s, k);
    let mut rng = subject_rng(config.seed ^ 0x5bd1_e995, subject);
    let w = config.shared_fraction;
    for _ in 0..16 {
        let own = gaussian_matrix(&mut rng, s, k);
        let mix: Vec<f64> = population
            .iter()
            .zip(&own)
            .map(|(p, o)| w * p + (1.0 - w) * o)
            .collect();
        if column_rank(&mix, s, k) == k {
            return Ok(SubjectProfile {
                spatial_mixing: Array::from_vec(&[s, k], mix)?,
                shared_fraction: w,
                noise_scale: config.noise_scale,
            });
        }
    }
    Err(Error::Rank {
        achieved: 0,
        required: k,
    })
}

/// Recording of one subject under the default signal model.
pub fn generate_recording(config: &ParadigmConfig, subject_id: usize) -> Result<ContinuousRecording> {
    let model = SignalModel::default();
    let profile = subject_profile(config, &model, subject_id)?;
    generate_recording_with(config, subject_id, &profile, &model)
}

pub fn generate_dataset(config: &ParadigmConfig) -> Result<Vec<ContinuousRecording>> {
    config.validate()?;
    (0..config.n_subjects)
        .into_par_iter()
        .map(|s| generate_recording(config, s))
        .collect()
}

/// Digest over every recording of a dataset, in subject order.
pub fn dataset_digest(recordings: &[ContinuousRecording]) -> String {
    let mut h = Sha256::new();
    for r in recordings {
        h.update(r.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

struct TrialPlan {
    rest: (usize, usize),
    sr_cue: usize,
    isp_cue: usize,
    vowels: Vec<Vowel>,
}

fn ms(v: f64) -> usize {
    (v * SAMPLE_RATE / 1000.0).round() as usize
}

/// Adds `amp * exp(-(t-c)^2 / 2 sigma^2) * sin(2 pi f t + phase)` to `src`.
fn add_burst(src: &mut [f64], center: f64, sigma: f64, freq: f64, amp: f64, phase: f64) {
    if amp == 0.0 {
        return;
    }
    let half = (5.0 * sigma).ceil();
    let lo = (center - half).max(0.0) as usize;
    let hi = ((center + half) as usize + 1).min(src.len());
    for (i, v) in src.iter_mut().enumerate().take(hi).skip(lo) {
        let t = i as f64;
        let env = (-(t - center).powi(2) / (2.0 * sigma * sigma)).exp();
        *v += amp * env * (2.0 * PI * freq * t / SAMPLE_RATE + phase).sin();
    }
}

/// Unit-RMS noise with a 1/f power spectrum.
fn pink_noise(n: usize, rng: &mut impl Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let nfft = n.next_power_of_two().max(2);
    let mut spec = vec![Complex::new(0.0, 0.0); nfft];
    let df = SAMPLE_RATE / nfft as f64;
    for k in 1..nfft / 2 {
        let f = (k as f64 * df).max(0.5);
        let scale = 1.0 / f.sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        spec[k] = Complex::new(re * scale, im * scale);
        spec[nfft - k] = spec[k].conj();
    }
    planner.plan_fft_inverse(nfft).process(&mut spec);
    let mut out: Vec<f64> = spec[..n].iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Recording of one subject with an explicit mixing profile and signal model.
pub fn generate_recording_with(
    config: &ParadigmConfig,
    subject_id: usize,
    profile: &SubjectProfile,
    model: &SignalModel,
) -> Result<ContinuousRecording> {
    config.validate()?;
    model.validate()?;
    if subject_id >= config.n_subjects {
        return Err(Error::Config(format!("subject {} >= n_subjects {}", subject_id, config.n_subjects)));
    }
    let (s, k) = (config.n_sensors, model.n_sources);
    if profile.spatial_mixing.shape() != [s, k] {
        return Err(Error::shape(
            "generate_recording",
            format!("mixing {:?} vs {} sensors x {} sources", profile.spatial_mixing.shape(), s, k),
        ));
    }
    let mut rng = subject_rng(config.seed, subject_id);
    let n_trials = config.trials_per_subject();

    // First-syllable vowels are drawn independently. Exactly balanced
    // per-subject counts would make held-out trials anti-correlated with
    // the remaining ones under trial-grouped splits.
    let first: Vec<Vowel> = (0..n_trials).map(|_| Vowel::ALL[rng.gen_range(0..3)]).collect();

    let lead = ms(3000.0);
    let mut t = lead;
    let mut plans = Vec::with_capacity(n_trials);
    let syl = ms(config.syllable_duration_ms as f64);
    let (lo, hi) = config.syllables_per_sentence;
    for &v0 in first.iter() {
        let rest = ms(rng.gen_range(1500.0..=2500.0));
        let rest_span = (t, t + rest);
        t += rest;
        let n_syl = rng.gen_range(lo..=hi);
        let mut vowels = vec![v0];
        vowels.extend((1..n_syl).map(|_| Vowel::ALL[rng.gen_range(0..3)]));
        let sr_cue = t;
        t += n_syl * syl;
        t += ms(rng.gen_range(800.0..=1200.0));
        let isp_cue = t;
        t += n_syl * syl;
        plans.push(TrialPlan {
            rest: rest_span,
            sr_cue,
            isp_cue,
            vowels,
        });
    }
    let tail_rest = ms(rng.gen_range(1500.0..=2500.0));
    let rest_tail = (t, t + tail_rest);
    let n = t + tail_rest + ms(3000.0);

    let sigma = ms(model.burst_sigma_ms) as f64;
    let mut sources = vec![vec![0.0; n]; k];
    let mut events = Vec::with_capacity(2 * n_trials);
    let mut rests = Vec::with_capacity(n_trials + 1);
    for (i, p) in plans.iter().enumerate() {
        let id = trial_id(subject_id, i);
        rests.push(p.rest);
        events.push(Event {
            sample: p.sr_cue,
            trial_id: id,
            condition: Condition::Sr,
            vowel: None,
        });
        events.push(Event {
            sample: p.isp_cue,
            trial_id: id,
            condition: Condition::Isp,
            vowel: Some(p.vowels[0]),
        });
        for (j, &v) in p.vowels.iter().enumerate() {
            let mid = (j * syl + syl / 2) as f64;
            let c = model.common;
            let ph: f64 = rng.gen_range(0.0..2.0 * PI);
            add_burst(&mut sources[c.source], p.sr_cue as f64 + mid, sigma, c.freq_hz, c.amplitude * model.sr_scale, ph);
            let ph: f64 = rng.gen_range(0.0..2.0 * PI);
            add_burst(&mut sources[c.source], p.isp_cue as f64 + mid, sigma, c.freq_hz, c.amplitude, ph);
            let b = model.vowels[v.index()];
            let ph: f64 = rng.gen_range(0.0..2.0 * PI);
            add_burst(&mut sources[b.source], p.isp_cue as f64 + mid, sigma, b.freq_hz, b.amplitude, ph);
        }
        if let Some(b) = model.preparatory {
            let ph: f64 = rng.gen_range(0.0..2.0 * PI);
            let center = p.isp_cue as f64 + ms(model.preparatory_center_ms.abs()) as f64 * model.preparatory_center_ms.signum();
            add_burst(&mut sources[b.source], center, sigma, b.freq_hz, b.amplitude, ph);
        }
    }
    rests.push(rest_tail);

    let mix = profile.spatial_mixing.data();
    let mut signal = vec![0.0; s * n];
    for (si, row) in signal.chunks_mut(n).enumerate() {
        for (ki, src) in sources.iter().enumerate() {
            let w = mix[si * k + ki];
            if w != 0.0 {
                row.iter_mut().zip(src).for_each(|(o, &v)| *o += w * v);
            }
        }
    }
    let ns = profile.noise_scale;
    if ns > 0.0 {
        let mut planner = FftPlanner::new();
        for row in signal.chunks_mut(n) {
            if model.pink_rms > 0.0 {
                let pink = pink_noise(n, &mut rng, &mut planner);
                row.iter_mut().zip(&pink).for_each(|(o, &p)| *o += ns * model.pink_rms * p);
            }
            if model.white_rms > 0.0 {
                for o in row.iter_mut() {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    *o += ns * model.white_rms * w;
                }
            }
            if model.line_amplitude > 0.0 {
                for (h, &f) in LINE_FREQS.iter().enumerate() {
                    let ph: f64 = rng.gen_range(0.0..2.0 * PI);
                    let a = ns * model.line_amplitude / (h + 1) as f64;
                    for (i, o) in row.iter_mut().enumerate() {
                        *o += a * (2.0 * PI * f * i as f64 / SAMPLE_RATE + ph).sin();
                    }
                }
            }
        }
    }
    Ok(ContinuousRecording {
        subject_id,
        signal: Array::from_vec(&[s, n], signal)?,
        sample_rate: SAMPLE_RATE,
        events,
        rests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ParadigmConfig {
        ParadigmConfig {
            n_subjects: 2,
            blocks_per_subject: 1,
            sentences_per_block: 3,
            n_sensors: 6,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_recording(&tiny(7), 1).unwrap();
        let b = generate_recording(&tiny(7), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = generate_recording(&tiny(8), 1).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn default_config_has_one_sr_and_one_isp_marker_per_trial() {
        let cfg = ParadigmConfig {
            n_subjects: 1,
            n_sensors: 4,
            ..Default::default()
        };
        let rec = generate_recording(&cfg, 0).unwrap();
        assert_eq!(cfg.trials_per_subject(), 102);
        assert_eq!(rec.events.len(), 2 * 102);
        for pair in rec.events.chunks(2) {
            assert_eq!(pair[0].condition, Condition::Sr);
            assert_eq!(pair[1].condition, Condition::Isp);
            assert_eq!(pair[0].trial_id, pair[1].trial_id);
        }
    }

    #[test]
    fn events_increase_and_rests_are_long_enough() {
        let rec = generate_recording(&tiny(3), 0).unwrap();
        assert!(rec.events.windows(2).all(|w| w[0].sample < w[1].sample));
        assert!(rec.rests.iter().all(|&(a, b)| b - a >= 1500));
        assert_eq!(rec.rests.len(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(0);
        cfg.n_sensors = 0;
        assert!(matches!(generate_recording(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = tiny(0);
        cfg.sentences_per_block = 0;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        assert!(matches!(generate_recording(&tiny(0), 2), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_has_one_recording_per_subject() {
        let mut cfg = tiny(4);
        cfg.n_subjects = 1;
        assert_eq!(generate_dataset(&cfg).unwrap().len(), 1);
        cfg.n_subjects = 3;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(dataset_digest(&a), dataset_digest(&b));
    }

    #[test]
    fn first_syllable_vowels_cover_all_classes() {
        let cfg = ParadigmConfig {
            n_subjects: 1,
            blocks_per_subject: 2,
            sentences_per_block: 17,
            n_sensors: 4,
            ..Default::default()
        };
        let rec = generate_recording(&cfg, 0).unwrap();
        let mut counts = [0usize; 3];
        for e in rec.events.iter().filter(|e| e.condition == Condition::Isp) {
            counts[e.vowel.unwrap().index()] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 4), "{:?}", counts);
    }

    #[test]
    fn mixing_has_full_column_rank() {
        let cfg = tiny(11);
        let model = SignalModel::default();
        let p = subject_profile(&cfg, &model, 1).unwrap();
        assert_eq!(column_rank(p.spatial_mixing.data(), 6, 4), 4);
    }

    #[test]
    fn archive_and_manifest_round_trip() {
        let rec = generate_recording(&tiny(5), 0).unwrap();
        let bytes = rec.to_archive().to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        let again = ContinuousRecording::from_parts(&back, &rec.manifest()).unwrap();
        assert_eq!(again, rec);
    }
}

//! Cue-locked epoching, Silence epochs from rest intervals and
//! peak-to-peak artifact rejection.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autonn::{Array, ArchiveTensor, TensorArchive};
use crate::error::{Error, Result};
use crate::synthgen::{silence_trial_id, Condition, ContinuousRecording, Vowel};

/// Baseline (pre-cue) span shared by every window kind.
pub const BASELINE_MS: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    PreCue,
    PostCue,
    Full,
}

impl WindowKind {
    pub const ALL: [WindowKind; 3] = [WindowKind::PreCue, WindowKind::PostCue, WindowKind::Full];

    pub fn bounds_ms(self) -> (f64, f64) {
        match self {
            WindowKind::PreCue => (-300.0, 0.0),
            WindowKind::PostCue => (0.0, 500.0),
            WindowKind::Full => (-300.0, 500.0),
        }
    }

    pub fn core_len(self, sample_rate: f64) -> usize {
        let (a, b) = self.bounds_ms();
        ms_to_samples(b - a, sample_rate)
    }

    /// Samples stored around the cue for this window (without margins): the
    /// baseline and the core window.
    pub fn layout(self, sample_rate: f64, margin: usize) -> EpochLayout {
        let baseline_len = ms_to_samples(BASELINE_MS, sample_rate);
        let (start, end) = self.bounds_ms();
        let analysis_len = baseline_len + ms_to_samples(end.max(0.0), sample_rate);
        EpochLayout {
            margin,
            baseline_len,
            analysis_len,
            core_offset: ms_to_samples(start + BASELINE_MS, sample_rate),
            core_len: self.core_len(sample_rate),
        }
    }
}

impl std::fmt::Display for WindowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WindowKind::PreCue => "pre-cue",
            WindowKind::PostCue => "post-cue",
            WindowKind::Full => "full",
        })
    }
}

impl std::str::FromStr for WindowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-cue" | "pre" => Ok(WindowKind::PreCue),
            "post-cue" | "post" => Ok(WindowKind::PostCue),
            "full" => Ok(WindowKind::Full),
            other => Err(Error::Config(format!("unknown window `{}` (expected pre-cue, post-cue, full)", other))),
        }
    }
}

pub fn ms_to_samples(ms: f64, sample_rate: f64) -> usize {
    (ms * sample_rate / 1000.0).round() as usize
}

/// Sample layout of a stored epoch:
/// `[margin | baseline ... analysis_len ... | margin]`, where the core window
/// starts `core_offset` samples into the analysis segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochLayout {
    pub margin: usize,
    pub baseline_len: usize,
    pub analysis_len: usize,
    pub core_offset: usize,
    pub core_len: usize,
}

impl EpochLayout {
    pub fn total_len(&self) -> usize {
        self.analysis_len + 2 * self.margin
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochMeta {
    pub subject_id: usize,
    pub trial_id: u64,
    pub condition: Condition,
    pub vowel: Option<Vowel>,
    pub window: WindowKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub meta: EpochMeta,
    /// [n_sensors, layout.total_len()]
    pub data: Array<f64>,
    pub layout: EpochLayout,
}

impl Epoch {
    pub fn n_sensors(&self) -> usize {
        self.data.shape()[0]
    }

    /// Columns `[start, start + len)` of the stored buffer.
    pub fn slice(&self, start: usize, len: usize) -> Result<Array<f64>> {
        let total = self.data.shape()[1];
        if start + len > total {
            return Err(Error::InvalidInput(format!("slice {}..{} beyond {} samples", start, start + len, total)));
        }
        let data: Vec<f64> = self
            .data
            .data()
            .chunks(total)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Array::from_vec(&[self.n_sensors(), len], data)
    }

    /// Analysis segment (baseline through window end), shifted by `shift`
    /// samples into the margins.
    pub fn analysis(&self, shift: isize) -> Result<Array<f64>> {
        let m = self.layout.margin as isize;
        if shift.abs() > m {
            return Err(Error::InvalidInput(format!("shift {} exceeds margin {}", shift, m)));
        }
        self.slice((m + shift) as usize, self.layout.analysis_len)
    }

    /// The core window, shifted by `shift` samples.
    pub fn core(&self, shift: isize) -> Result<Array<f64>> {
        let m = self.layout.margin as isize;
        if shift.abs() > m {
            return Err(Error::InvalidInput(format!("shift {} exceeds margin {}", shift, m)));
        }
        self.slice((m + shift) as usize + self.layout.core_offset, self.layout.core_len)
    }

    /// Largest per-sensor peak-to-peak amplitude over the analysis segment.
    pub fn max_ptp(&self) -> f64 {
        let total = self.data.shape()[1];
        let (a, n) = (self.layout.margin, self.layout.analysis_len);
        self.data
            .data()
            .chunks(total)
            .map(|row| {
                let seg = &row[a..a + n];
                let (lo, hi) = seg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub subject_id: usize,
    pub trial_id: Option<u64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochSet {
    pub epochs: Vec<Epoch>,
    pub sample_rate: f64,
    pub rejection_log: Vec<RejectionEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochOptions {
    pub margin_ms: f64,
    /// Keep at most as many Silence epochs per subject as ISP epochs.
    pub match_silence: bool,
}

impl Default for EpochOptions {
    fn default() -> Self {
        EpochOptions {
            margin_ms: 100.0,
            match_silence: true,
        }
    }
}

fn cut(rec: &ContinuousRecording, start: usize, len: usize) -> Result<Array<f64>> {
    let n = rec.n_samples();
    let data: Vec<f64> = rec
        .signal
        .data()
        .chunks(n)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Array::from_vec(&[rec.n_sensors(), len], data)
}

/// One epoch per cue event plus Silence epochs from rest intervals.
pub fn extract_epochs(rec: &ContinuousRecording, window: WindowKind, opts: &EpochOptions) -> Result<EpochSet> {
    let fs = rec.sample_rate;
    let margin = ms_to_samples(opts.margin_ms, fs);
    let layout = window.layout(fs, margin);
    let total = layout.total_len();
    let before = layout.baseline_len + margin;
    let mut set = EpochSet {
        sample_rate: fs,
        ..Default::default()
    };
    let n = rec.n_samples();
    for ev in &rec.events {
        if ev.sample < before || ev.sample - before + total > n {
            set.rejection_log.push(RejectionEntry {
                subject_id: rec.subject_id,
                trial_id: Some(ev.trial_id),
                reason: format!("{:?} cue at sample {} too close to the recording edge", ev.condition, ev.sample),
            });
            continue;
        }
        set.epochs.push(Epoch {
            meta: EpochMeta {
                subject_id: rec.subject_id,
                trial_id: ev.trial_id,
                condition: ev.condition,
                vowel: ev.vowel,
                window,
            },
            data: cut(rec, ev.sample - before, total)?,
            layout,
        });
    }
    let n_isp = set.epochs.iter().filter(|e| e.meta.condition == Condition::Isp).count();
    let mut n_silence = 0;
    for (i, &(a, b)) in rec.rests.iter().enumerate() {
        let id = silence_trial_id(rec.subject_id, i);
        if b.saturating_sub(a) < total || b > n {
            set.rejection_log.push(RejectionEntry {
                subject_id: rec.subject_id,
                trial_id: Some(id),
                reason: format!("rest interval of {} samples shorter than the {}-sample epoch", b.saturating_sub(a), total),
            });
            continue;
        }
        if opts.match_silence && n_silence >= n_isp {
            break;
        }
        let start = a + (b - a - total) / 2;
        set.epochs.push(Epoch {
            meta: EpochMeta {
                subject_id: rec.subject_id,
                trial_id: id,
                condition: Condition::Silence,
                vowel: None,
                window,
            },
            data: cut(rec, start, total)?,
            layout,
        });
        n_silence += 1;
    }
    Ok(set)
}

impl EpochSet {
    pub fn merge(sets: Vec<EpochSet>) -> Result<EpochSet> {
        let mut out = EpochSet::default();
        for s in sets {
            if out.epochs.is_empty() && out.sample_rate == 0.0 {
                out.sample_rate = s.sample_rate;
            } else if s.sample_rate != out.sample_rate {
                return Err(Error::InvalidInput(format!("sample rates {} and {} differ", out.sample_rate, s.sample_rate)));
            }
            out.epochs.extend(s.epochs);
            out.rejection_log.extend(s.rejection_log);
            out.warnings.extend(s.warnings);
        }
        out.check_consistent()?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.epochs.first().map_or(0, |e| e.n_sensors())
    }

    /// All epochs share sensor count and layout; equal trial ids share a subject.
    pub fn check_consistent(&self) -> Result<()> {
        let mut owner: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &self.epochs {
            if e.n_sensors() != self.n_sensors() || e.layout != self.epochs[0].layout {
                return Err(Error::InvalidInput("epochs differ in sensor count or layout".into()));
            }
            if let Some(&s) = owner.get(&e.meta.trial_id) {
                if s != e.meta.subject_id {
                    return Err(Error::Leakage(format!("trial {} appears under subjects {} and {}", e.meta.trial_id, s, e.meta.subject_id)));
                }
            }
            owner.insert(e.meta.trial_id, e.meta.subject_id);
        }
        Ok(())
    }

    /// Eight times the median per-sensor peak-to-peak amplitude.
    pub fn default_ptp_threshold(&self) -> f64 {
        let mut ptps: Vec<f64> = Vec::new();
        for e in &self.epochs {
            let total = e.data.shape()[1];
            let (a, n) = (e.layout.margin, e.layout.analysis_len);
            for row in e.data.data().chunks(total) {
                let seg = &row[a..a + n];
                let (lo, hi) = seg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                ptps.push(hi - lo);
            }
        }
        if ptps.is_empty() {
            return f64::INFINITY;
        }
        ptps.sort_by(f64::total_cmp);
        let m = ptps.len();
        let median = if m % 2 == 1 { ptps[m / 2] } else { 0.5 * (ptps[m / 2 - 1] + ptps[m / 2]) };
        8.0 * median
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        if let Some(first) = self.epochs.first() {
            let (s, l) = (first.n_sensors(), first.layout.total_len());
            let mut data = Vec::with_capacity(self.epochs.len() * s * l);
            for e in &self.epochs {
                data.extend_from_slice(e.data.data());
            }
            a.insert("epochs", ArchiveTensor::f64(&[self.epochs.len(), s, l], data));
        }
        a.metadata.insert("sample_rate".into(), self.sample_rate.to_string());
        Ok(a)
    }

    /// JSON sidecar: per-epoch metadata, layout and the rejection log.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "sample_rate": self.sample_rate,
            "layout": self.epochs.first().map(|e| e.layout),
            "epochs": self.epochs.iter().map(|e| &e.meta).collect::<Vec<_>>(),
            "rejection_log": self.rejection_log,
            "warnings": self.warnings,
        })
    }

    pub fn from_parts(archive: &TensorArchive, manifest: &serde_json::Value) -> Result<Self> {
        let field = |k: &str| manifest.get(k).cloned().ok_or_else(|| Error::InvalidInput(format!("manifest lacks `{}`", k)));
        let metas: Vec<EpochMeta> = serde_json::from_value(field("epochs")?)?;
        let layout: Option<EpochLayout> = serde_json::from_value(field("layout")?)?;
        let mut set = EpochSet {
            sample_rate: serde_json::from_value(field("sample_rate")?)?,
            rejection_log: serde_json::from_value(field("rejection_log")?)?,
            warnings: serde_json::from_value(field("warnings")?)?,
            epochs: Vec::with_capacity(metas.len()),
        };
        if let Some(layout) = layout {
            let t = archive.get("epochs").ok_or_else(|| Error::MissingTensor("epochs".into()))?;
            let all = t.to_array::<f64>();
            if all.ndim() != 3 || all.shape()[0] != metas.len() || all.shape()[2] != layout.total_len() {
                return Err(Error::shape("EpochSet::from_parts", format!("epochs {:?} vs {} metas", all.shape(), metas.len())));
            }
            let (s, l) = (all.shape()[1], all.shape()[2]);
            for (meta, chunk) in metas.into_iter().zip(all.data().chunks(s * l)) {
                set.epochs.push(Epoch {
                    meta,
                    data: Array::from_vec(&[s, l], chunk.to_vec())?,
                    layout,
                });
            }
        }
        Ok(set)
    }
}

/// Removes epochs whose largest per-sensor peak-to-peak amplitude exceeds
/// `threshold`, logging each removal.
pub fn reject_artifacts(mut set: EpochSet, threshold: f64) -> Result<EpochSet> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("peak-to-peak threshold must be non-negative, got {}", threshold)));
    }
    let before = set.epochs.len();
    let mut kept = Vec::with_capacity(before);
    for e in set.epochs.drain(..) {
        let ptp = e.max_ptp();
        if ptp > threshold || threshold == 0.0 {
            set.rejection_log.push(RejectionEntry {
                subject_id: e.meta.subject_id,
                trial_id: Some(e.meta.trial_id),
                reason: format!("{:?} epoch peak-to-peak {:.4e} exceeds {:.4e}", e.meta.condition, ptp, threshold),
            });
        } else {
            kept.push(e);
        }
    }
    let removed = before - kept.len();
    if before > 0 && 2 * removed > before {
        let msg = format!("artifact rejection removed {} of {} epochs (threshold {:.4e})", removed, before, threshold);
        warn!("{}", msg);
        set.warnings.push(msg);
    }
    set.epochs = kept;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Event;

    const FS: f64 = 500.0;

    /// One sensor whose value equals the sample index; one cue at 5000.
    fn ramp_recording() -> ContinuousRecording {
        let n = 12_000;
        let signal = Array::from_vec(&[2, n], (0..2 * n).map(|i| (i % n) as f64).collect()).unwrap();
        ContinuousRecording {
            subject_id: 3,
            signal,
            sample_rate: FS,
            events: vec![Event {
                sample: 5000,
                trial_id: 30_000,
                condition: Condition::Isp,
                vowel: Some(Vowel::E),
            }],
            rests: vec![(7000, 7400), (8000, 9000)],
        }
    }

    #[test]
    fn window_lengths_at_500_hz() {
        assert_eq!(WindowKind::PreCue.core_len(FS), 150);
        assert_eq!(WindowKind::PostCue.core_len(FS), 250);
        assert_eq!(WindowKind::Full.core_len(FS), 400);
        assert_eq!(WindowKind::PostCue.layout(FS, 50).core_offset, 150);
    }

    #[test]
    fn pre_cue_core_is_the_300_ms_before_the_cue() {
        let set = extract_epochs(&ramp_recording(), WindowKind::PreCue, &EpochOptions::default()).unwrap();
        let isp = &set.epochs[0];
        let core = isp.core(0).unwrap();
        assert_eq!(core.shape(), &[2, 150]);
        assert_eq!(core.data()[0], 4850.0);
        assert_eq!(core.data()[149], 4999.0);
        assert_eq!(isp.core(-50).unwrap().data()[0], 4800.0);
        assert_eq!(isp.core(50).unwrap().data()[149], 5049.0);
        assert!(isp.core(51).is_err());
    }

    #[test]
    fn full_and_post_cue_slices() {
        let rec = ramp_recording();
        let full = extract_epochs(&rec, WindowKind::Full, &EpochOptions::default()).unwrap();
        let core = full.epochs[0].core(0).unwrap();
        assert_eq!(core.shape(), &[2, 400]);
        assert_eq!(core.data()[0], 4850.0);
        let post = extract_epochs(&rec, WindowKind::PostCue, &EpochOptions::default()).unwrap();
        let e = &post.epochs[0];
        assert_eq!(e.core(0).unwrap().data()[0], 5000.0);
        assert_eq!(e.analysis(0).unwrap().data()[0], 4850.0);
        assert_eq!(e.analysis(0).unwrap().shape(), &[2, 400]);
    }

    #[test]
    fn short_rest_is_skipped_and_logged() {
        let set = extract_epochs(&ramp_recording(), WindowKind::Full, &EpochOptions::default()).unwrap();
        // Full needs 400 + 2 * 50 samples: the 400-sample rest is too short.
        let silence: Vec<_> = set.epochs.iter().filter(|e| e.meta.condition == Condition::Silence).collect();
        assert_eq!(silence.len(), 1);
        assert_eq!(silence[0].meta.trial_id, silence_trial_id(3, 1));
        assert_eq!(silence[0].data.data()[0], 8250.0);
        assert_eq!(set.rejection_log.len(), 1);
        assert_eq!(set.rejection_log[0].trial_id, Some(silence_trial_id(3, 0)));
    }

    #[test]
    fn edge_events_are_skipped_and_logged() {
        let mut rec = ramp_recording();
        rec.events[0].sample = 100;
        let set = extract_epochs(&rec, WindowKind::PreCue, &EpochOptions::default()).unwrap();
        assert!(set.epochs.iter().all(|e| e.meta.condition == Condition::Silence));
        assert!(set.rejection_log.iter().any(|r| r.trial_id == Some(30_000)));
    }

    fn noisy_set(n: usize) -> EpochSet {
        let mut sets = Vec::new();
        for s in 0..n {
            let mut rec = ramp_recording();
            rec.subject_id = s;
            let len = rec.n_samples();
            let data: Vec<f64> = (0..2 * len).map(|i| ((i * 7919 + s * 31) % 101) as f64 / 100.0).collect();
            rec.signal = Array::from_vec(&[2, len], data).unwrap();
            rec.events[0].trial_id = crate::synthgen::trial_id(s, 0);
            sets.push(extract_epochs(&rec, WindowKind::PostCue, &EpochOptions::default()).unwrap());
        }
        EpochSet::merge(sets).unwrap()
    }

    #[test]
    fn huge_threshold_keeps_everything() {
        let set = noisy_set(3);
        let out = reject_artifacts(set.clone(), 1e12).unwrap();
        assert_eq!(out.epochs, set.epochs);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn spike_removes_exactly_that_epoch() {
        let mut set = noisy_set(4);
        let threshold = set.default_ptp_threshold() / 8.0 * 2.0;
        let target = set.epochs[2].meta.clone();
        let e = &mut set.epochs[2];
        let col = e.layout.margin + 10;
        let max = e.data.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        e.data.data_mut()[col] = 10.0 * max;
        let out = reject_artifacts(set.clone(), threshold).unwrap();
        assert_eq!(out.len(), set.len() - 1);
        assert!(out.epochs.iter().all(|e| e.meta != target));
        assert_eq!(out.rejection_log.last().unwrap().trial_id, Some(target.trial_id));
    }

    #[test]
    fn zero_threshold_removes_all_with_warning() {
        let out = reject_artifacts(noisy_set(2), 0.0).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(reject_artifacts(noisy_set(1), -1.0).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let set = noisy_set(2);
        let archive = TensorArchive::from_bytes(&set.to_archive().unwrap().to_bytes()).unwrap();
        let back = EpochSet::from_parts(&archive, &set.manifest()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn leaked_trial_ids_are_detected() {
        let mut set = noisy_set(2);
        let id = set.epochs[0].meta.trial_id;
        let other = set.epochs.iter().position(|e| e.meta.subject_id != set.epochs[0].meta.subject_id).unwrap();
        set.epochs[other].meta.trial_id = id;
        assert!(matches!(set.check_consistent(), Err(Error::Leakage(_))));
    }
}

//! Signal conditioning (notch, band-pass, decimation) and epoch extraction.

pub mod epochs;
pub mod filter;

pub use epochs::{
    extract_epochs, ms_to_samples, reject_artifacts, Epoch, EpochLayout, EpochMeta, EpochOptions, EpochSet,
    RejectionEntry, WindowKind, BASELINE_MS,
};
pub use filter::{apply_bandpass, apply_filters, apply_notch_bank, decimate_2x, FilterSpec};

use crate::error::{Error, Result};
use crate::synthgen::ContinuousRecording;

/// Filters a raw recording and halves its rate. Event samples map to the
/// nearest retained sample; rest intervals shrink to the retained samples
/// inside them.
pub fn preprocess_recording(rec: &ContinuousRecording, spec: &FilterSpec) -> Result<ContinuousRecording> {
    if rec.n_samples() < 2 {
        return Err(Error::InvalidInput(format!("recording has {} samples", rec.n_samples())));
    }
    let filtered = apply_filters(&rec.signal, rec.sample_rate, spec)?;
    let signal = decimate_2x(&filtered)?;
    let n = signal.shape()[1];
    let events = rec
        .events
        .iter()
        .map(|e| {
            let mut e = *e;
            e.sample = ((e.sample + 1) / 2).min(n - 1);
            e
        })
        .collect();
    let rests = rec.rests.iter().map(|&(a, b)| ((a + 1) / 2, ((b + 1) / 2).min(n))).collect();
    Ok(ContinuousRecording {
        subject_id: rec.subject_id,
        signal,
        sample_rate: rec.sample_rate / 2.0,
        events,
        rests,
    })
}

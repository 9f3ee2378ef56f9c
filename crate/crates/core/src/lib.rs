//! Scalogram-image decoding of multichannel MEG-like recordings.

pub mod autonn;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod evalstats;
pub mod imagerep;
pub mod preproc;
pub mod report;
pub mod synthgen;
pub mod tfr;
pub mod trainkit;

pub use error::{Error, Result};

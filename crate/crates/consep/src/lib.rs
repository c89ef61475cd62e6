//! Consistency-based pseudo-labeling for two-model speech separation.
//!
//! The pipeline scores the agreement between two heterogeneous separators'
//! outputs (SCM/mSCM), selects high-confidence mixtures as pseudo-labeled
//! training data, orchestrates the iterative adaptation loop over pluggable
//! backends, and fuses the two systems' outputs in the spectrogram domain.

pub mod analysis;
pub mod audio;
pub mod consistency;
pub mod cps;
pub mod driver;
pub mod error;
pub mod fusion;
pub mod manifest;
pub mod metrics;
pub mod mixsim;
pub mod separators;

pub use audio::{read_wav, resample, write_wav, WavEncoding, Waveform};
pub use consistency::{SciTuple, SourceSet};
pub use error::{Error, Result};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRecord, Origin};
pub use metrics::{best_assignment, sdr, sdri, si_snr, si_snri, Assignment, Metric};

//! Instrument separation for symbolic music.
//!
//! Given a mixture (a `time x pitch` grid of notes with no instrument
//! labels), a mask-conditioned diffusion model assigns each note to piano,
//! guitar, bass, strings or drums. The crate covers MIDI ingestion, the
//! bit-packed phrase dataset, the diffusion samplers, the TransUNet denoiser,
//! a VAE baseline, training and the Hamming-distance metrics.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod export;
pub mod ingest;
pub mod kv;
pub mod midi;
pub mod model;
pub mod phrase;
pub mod render;
pub mod roll;
pub mod synth;
pub mod training;

pub use candle_core::{DType, Device};
pub use error::{Error, Result};

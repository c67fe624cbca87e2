//! Cough-audio synthesis pipeline built around an auxiliary-classifier GAN.
//!
//! The crate covers the full path from raw COUGHVID-style metadata and WAV
//! recordings to synthetic cough audio:
//!
//! - [`metadata`]: CSV parsing, null accounting, quality filtering, expert
//!   annotation restructuring and class-balanced sampling.
//! - [`dsp`]: WAV I/O, preprocessing (mono, peak normalize, zero-phase
//!   Butterworth low-pass, decimation) and hysteresis cough segmentation.
//! - [`features`]: STFT, mel-spectrogram, MFCC, chroma and Griffin-Lim
//!   inversion back to audio.
//! - [`nn`]: a minimal from-scratch neural kernel (tensors, layers, losses,
//!   Adam, gradient checking).
//! - [`acgan`]: the generator/discriminator pair, training loop, sample
//!   export, checkpointing and classification.
//! - [`storage`]: NPY persistence and the on-disk segment store layout.

pub mod acgan;
pub mod dsp;
pub mod features;
pub mod metadata;
pub mod nn;
pub mod storage;

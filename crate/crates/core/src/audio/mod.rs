//! Waveforms, spectrogram analysis/synthesis and frame masks.

pub mod diff;
mod mask;
mod resample;
mod stft;
mod waveform;

pub use mask::{sample_mask, FrameMask, MAX_MASK_RATIO};
pub use resample::resample;
pub use stft::{istft, stft, Spectrogram, StftConfig, StftEngine, WindowKind};
pub use waveform::{pcm16, read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};

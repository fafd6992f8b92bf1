//! Signal layer: waveform I/O, resampling, mel analysis, phase recovery and
//! cross-fade splicing.

mod griffin_lim;
mod mel;
mod resample;
mod splice;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, GriffinLimTrace, DEFAULT_GRIFFIN_LIM_ITERS};
pub use mel::{mel_spectrogram, MelAnalyzer, MelConfig, MelSpectrogram};
pub use resample::resample;
pub use splice::crossfade_splice;
pub use stft::{hann_window, Stft};
pub use wav::{decode_wav, encode_wav, load_wav, write_wav, Waveform, CANONICAL_SAMPLE_RATE};

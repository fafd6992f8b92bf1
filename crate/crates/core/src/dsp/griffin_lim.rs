use realfft::num_complex::Complex;

use super::mel::{MelAnalyzer, MelSpectrogram};
use super::Waveform;

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 60;

/// Per-iteration STFT inconsistency `‖ |STFT(x_i)| - target ‖_F`.
#[derive(Debug, Clone, Default)]
pub struct GriffinLimTrace {
    pub residuals: Vec<f64>,
}

/// Linear STFT magnitudes recovered from a log-mel spectrogram: undo the log
/// (values at the floor map to zero energy), apply the filterbank
/// pseudo-inverse, clamp negatives and take the square root of power.
fn target_magnitudes(mel: &MelSpectrogram, analyzer: &MelAnalyzer) -> Vec<Vec<f64>> {
    let cfg = analyzer.config();
    let n_bins = analyzer.n_bins();
    let n_mels = cfg.n_mels;
    let floor = cfg.log_floor_value();
    let pinv = analyzer.pseudo_inverse();
    let mut energies = vec![0.0; n_mels];
    (0..mel.n_frames)
        .map(|t| {
            for (e, &v) in energies.iter_mut().zip(mel.frame(t)) {
                *e = if v <= floor { 0.0 } else { v.exp() };
            }
            (0..n_bins)
                .map(|b| {
                    let row = &pinv[b * n_mels..(b + 1) * n_mels];
                    let p: f64 = row.iter().zip(&energies).map(|(a, e)| a * e).sum();
                    p.max(0.0).sqrt()
                })
                .collect()
        })
        .collect()
}

fn with_phase(mag: &[Vec<f64>], phase: &[Vec<Complex<f64>>]) -> Vec<Vec<Complex<f64>>> {
    mag.iter()
        .zip(phase)
        .map(|(m, p)| {
            m.iter()
                .zip(p)
                .map(|(&a, c)| {
                    let n = c.norm();
                    if n > 0.0 {
                        c * (a / n)
                    } else {
                        Complex::new(a, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Griffin-Lim phase recovery from zero initial phase, with the residual of
/// every iteration recorded.
pub fn griffin_lim_traced(
    mel: &MelSpectrogram,
    analyzer: &MelAnalyzer,
    n_iters: usize,
) -> (Waveform, GriffinLimTrace) {
    assert!(n_iters >= 1, "griffin-lim needs at least one iteration");
    let cfg = analyzer.config();
    let stft = analyzer.stft();
    let frames = mel.n_frames;
    let mag = target_magnitudes(mel, analyzer);

    let mut spectra: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|m| m.iter().map(|&a| Complex::new(a, 0.0)).collect())
        .collect();
    let mut trace = GriffinLimTrace::default();
    for _ in 0..n_iters {
        let signal = stft.synthesize_extended(&spectra);
        let consistent = stft.analyze_extended(&signal, frames);
        let residual: f64 = consistent
            .iter()
            .zip(&mag)
            .flat_map(|(c, m)| c.iter().zip(m).map(|(z, a)| (z.norm() - a).powi(2)))
            .sum::<f64>()
            .sqrt();
        trace.residuals.push(residual);
        spectra = with_phase(&mag, &consistent);
    }
    let ext = stft.synthesize_extended(&spectra);
    let offset = cfg.fft_size / 2;
    let len = (frames - 1) * cfg.hop_size;
    let samples = ext[offset..offset + len]
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0) as f32)
        .collect();
    (Waveform::new(samples, cfg.sample_rate), trace)
}

/// Inverts a log-mel spectrogram to audio of `(T - 1) * hop` samples.
pub fn griffin_lim(mel: &MelSpectrogram, analyzer: &MelAnalyzer, n_iters: usize) -> Waveform {
    griffin_lim_traced(mel, analyzer, n_iters).0
}

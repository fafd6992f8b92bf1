use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::stft::Stft;
use super::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
            n_mels: 80,
            sample_rate: super::CANONICAL_SAMPLE_RATE,
            fmin: 0.0,
            fmax: super::CANONICAL_SAMPLE_RATE as f64 / 2.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bins = self.fft_size / 2 + 1;
        if self.win_size > self.fft_size {
            return Err(Error::InvalidConfig("win_size exceeds fft_size".into()));
        }
        if self.hop_size == 0 || self.hop_size > self.win_size {
            return Err(Error::InvalidConfig("hop_size must be in 1..=win_size".into()));
        }
        if self.n_mels == 0 || self.n_mels >= bins {
            return Err(Error::InvalidConfig(format!(
                "n_mels must be in 1..{bins}"
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::InvalidConfig("need 0 <= fmin < fmax <= nyquist".into()));
        }
        Ok(())
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Seconds to the nearest frame index.
    pub fn seconds_to_frame(&self, secs: f64) -> usize {
        (secs * self.sample_rate as f64 / self.hop_size as f64).round().max(0.0) as usize
    }
}

/// Log-compressed mel energies, `n_frames` rows of `n_mels` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * n_mels {
            return Err(Error::shape(
                format!("{n_frames}x{n_mels} = {} values", n_frames * n_mels),
                data.len(),
            ));
        }
        Ok(Self {
            n_frames,
            n_mels,
            data,
        })
    }

    pub fn filled(n_frames: usize, n_mels: usize, value: f64) -> Self {
        Self {
            n_frames,
            n_mels,
            data: vec![value; n_frames * n_mels],
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.n_mels + d]
    }

    /// Frames `[lo, hi)` as a new spectrogram.
    pub fn slice_frames(&self, lo: usize, hi: usize) -> MelSpectrogram {
        assert!(lo <= hi && hi <= self.n_frames, "frame range {lo}..{hi} of {}", self.n_frames);
        MelSpectrogram {
            n_frames: hi - lo,
            n_mels: self.n_mels,
            data: self.data[lo * self.n_mels..hi * self.n_mels].to_vec(),
        }
    }

    pub fn same_shape(&self, other: &MelSpectrogram) -> Result<()> {
        if self.n_frames != other.n_frames || self.n_mels != other.n_mels {
            return Err(Error::shape(
                format!("{}x{}", self.n_frames, self.n_mels),
                format!("{}x{}", other.n_frames, other.n_mels),
            ));
        }
        Ok(())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, each divided by the sum of its
/// weights. Row-major `n_mels x n_bins`.
fn area_normalized_filterbank(cfg: &MelConfig) -> Vec<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|b| b as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64)
        .collect();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * n_bins..(m + 1) * n_bins];
        for (b, &f) in bin_hz.iter().enumerate() {
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            row[b] = w;
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            // filter narrower than one bin: fall back to the nearest bin
            let nearest = (center * cfg.fft_size as f64 / cfg.sample_rate as f64).round() as usize;
            row[nearest.min(n_bins - 1)] = 1.0;
        } else {
            row.iter_mut().for_each(|w| *w /= sum);
        }
    }
    fb
}

/// Cached analysis state for one [`MelConfig`].
pub struct MelAnalyzer {
    cfg: MelConfig,
    stft: Stft,
    filterbank: Vec<f64>,
    pseudo_inverse: OnceLock<Vec<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stft: Stft::new(cfg.fft_size, cfg.hop_size, cfg.win_size),
            filterbank: area_normalized_filterbank(&cfg),
            pseudo_inverse: OnceLock::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    /// Row-major `n_mels x n_bins` filter matrix.
    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    /// Row-major `n_bins x n_mels` Moore-Penrose pseudo-inverse of the
    /// filterbank.
    pub fn pseudo_inverse(&self) -> &[f64] {
        self.pseudo_inverse.get_or_init(|| {
            let n_bins = self.n_bins();
            let m = nalgebra::DMatrix::from_row_slice(self.cfg.n_mels, n_bins, &self.filterbank);
            let pinv = m
                .pseudo_inverse(1e-10)
                .expect("non-negative epsilon is always accepted");
            let mut out = vec![0.0; n_bins * self.cfg.n_mels];
            for b in 0..n_bins {
                for k in 0..self.cfg.n_mels {
                    out[b * self.cfg.n_mels + k] = pinv[(b, k)];
                }
            }
            out
        })
    }

    /// Mel energies before log compression.
    pub fn mel_energies(&self, w: &Waveform) -> Result<(usize, Vec<f64>)> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                actual: w.sample_rate,
            });
        }
        if w.samples.is_empty() {
            return Err(Error::CorruptFile("empty waveform".into()));
        }
        let samples: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
        let spectra = self.stft.analyze_centered(&samples);
        let n_bins = self.n_bins();
        let n_mels = self.cfg.n_mels;
        let mut energies = vec![0.0; spectra.len() * n_mels];
        let mut power = vec![0.0; n_bins];
        for (t, spec) in spectra.iter().enumerate() {
            for (p, c) in power.iter_mut().zip(spec) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let row = &self.filterbank[m * n_bins..(m + 1) * n_bins];
                energies[t * n_mels + m] = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            }
        }
        Ok((spectra.len(), energies))
    }

    pub fn analyze(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let (frames, energies) = self.mel_energies(w)?;
        let floor = self.cfg.log_floor;
        let data = energies.into_iter().map(|e| e.max(floor).ln()).collect();
        MelSpectrogram::new(frames, self.cfg.n_mels, data)
    }
}

/// Centered, Hann-windowed STFT power mapped through the area-normalized mel
/// filterbank and log-compressed with a floor.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(*cfg)?.analyze(w)
}

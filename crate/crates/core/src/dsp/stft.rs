use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

/// Periodic Hann window of `win_size`, zero-padded symmetrically to `fft_size`.
pub fn hann_window(win_size: usize, fft_size: usize) -> Vec<f64> {
    let mut w = vec![0.0; fft_size];
    let offset = (fft_size - win_size) / 2;
    for i in 0..win_size {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / win_size as f64).cos();
    }
    w
}

fn reflect_index(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Short-time Fourier transform with a fixed frame layout.
///
/// Two framings are supported: the centered one used for analysis (reflect
/// padding by `fft_size / 2`, so a signal of `N` samples yields
/// `1 + N / hop` frames) and an unpadded one over an extended signal, used by
/// phase recovery so that the least-squares inverse is an exact projection.
pub struct Stft {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    pub fn new(fft_size: usize, hop_size: usize, win_size: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            fft_size,
            hop_size,
            window: hann_window(win_size, fft_size),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn centered_frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_size
    }

    /// Centered analysis: frame `t` is centered on sample `t * hop`.
    pub fn analyze_centered(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = samples.len() as i64;
        let pad = (self.fft_size / 2) as i64;
        let frames = self.centered_frame_count(samples.len());
        let mut buf = vec![0.0; self.fft_size];
        let mut scratch = self.forward.make_scratch_vec();
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * self.hop_size) as i64 - pad;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = reflect_index(start + j as i64, n);
                *b = samples[idx] * self.window[j];
            }
            let mut spec = self.forward.make_output_vec();
            self.forward
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("fft length fixed at plan time");
            out.push(spec);
        }
        out
    }

    /// Unpadded analysis of an extended signal: frame `t` starts at `t * hop`.
    pub fn analyze_extended(&self, ext: &[f64], frames: usize) -> Vec<Vec<Complex<f64>>> {
        let mut buf = vec![0.0; self.fft_size];
        let mut scratch = self.forward.make_scratch_vec();
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.hop_size;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = ext[start + j] * self.window[j];
            }
            let mut spec = self.forward.make_output_vec();
            self.forward
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("fft length fixed at plan time");
            out.push(spec);
        }
        out
    }

    pub fn extended_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop_size + self.fft_size
    }

    /// Least-squares inverse of [`Stft::analyze_extended`]: windowed
    /// overlap-add divided by the summed squared window. Samples no frame
    /// weights are set to zero.
    pub fn synthesize_extended(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let frames = spectra.len();
        let len = self.extended_len(frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![0.0; self.fft_size];
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / self.fft_size as f64;
        let last = self.n_bins() - 1;
        for (t, spec) in spectra.iter().enumerate() {
            let mut spec = spec.clone();
            spec[0].im = 0.0;
            spec[last].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("fft length fixed at plan time");
            let start = t * self.hop_size;
            for j in 0..self.fft_size {
                let w = self.window[j];
                out[start + j] += buf[j] * scale * w;
                norm[start + j] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-10 { *o / n } else { 0.0 };
        }
        out
    }
}

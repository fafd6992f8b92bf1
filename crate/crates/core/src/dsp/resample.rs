use std::f64::consts::PI;

use super::Waveform;

const ZERO_CROSSINGS: f64 = 16.0;
const ROLLOFF: f64 = 0.97;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rational-ratio resampling with a Hann-windowed sinc
/// polyphase filter bank.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    if w.sample_rate == target_rate || w.samples.is_empty() {
        return Waveform::new(w.samples.clone(), target_rate);
    }
    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let g = gcd(src, dst);
    let up = dst / g;
    let down = src / g;

    let cutoff = ROLLOFF * (dst as f64 / src as f64).min(1.0);
    let half_width = (ZERO_CROSSINGS / cutoff).ceil() as i64;
    let taps = (2 * half_width) as usize;

    // table[p][j] is the weight of input sample base + j - half_width + 1
    // for an output landing at fractional position p / up past base.
    let mut table = vec![0.0f64; up as usize * taps];
    for p in 0..up as usize {
        let frac = p as f64 / up as f64;
        for j in 0..taps {
            let offset = j as i64 - half_width + 1;
            let d = frac - offset as f64;
            let win = if d.abs() < half_width as f64 {
                0.5 * (1.0 + (PI * d / half_width as f64).cos())
            } else {
                0.0
            };
            table[p * taps + j] = cutoff * sinc(cutoff * d) * win;
        }
    }

    let n_in = w.samples.len() as i64;
    let out_len = ((w.samples.len() as u64 * dst + src / 2) / src) as usize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let t = n * down;
        let base = (t / up) as i64;
        let phase = (t % up) as usize;
        let row = &table[phase * taps..(phase + 1) * taps];
        let mut acc = 0.0f64;
        for (j, &h) in row.iter().enumerate() {
            let i = base + j as i64 - half_width + 1;
            if i >= 0 && i < n_in {
                acc += h * w.samples[i as usize] as f64;
            }
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    Waveform::new(out, target_rate)
}

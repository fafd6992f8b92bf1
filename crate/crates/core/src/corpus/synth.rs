//! Deterministic pseudo-phoneme corpus: each class is a harmonic tone with
//! its own fundamental and two formant-like resonances.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusItem, Gender};
use crate::dsp::{MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::problem::{PhonemeInventory, PhonemeSegmentation};

/// Cross-fade between neighbouring phonemes.
const FADE_SECS: f64 = 0.02;
const FUNDAMENTALS: [f64; 8] = [220.0, 330.0, 165.0, 440.0, 275.0, 385.0, 196.0, 495.0];
const FORMANT1: [f64; 8] = [700.0, 400.0, 550.0, 300.0, 850.0, 450.0, 600.0, 350.0];
const FORMANT2: [f64; 8] = [1200.0, 2200.0, 900.0, 2700.0, 1600.0, 1900.0, 1000.0, 2400.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of non-silence classes, named `A`, `B`, ...
    pub n_phonemes: usize,
    /// Inclusive range of phoneme durations in frames.
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Leading and trailing silence, in frames.
    pub silence_frames: usize,
    pub n_speakers: usize,
    pub mel: MelConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_phonemes: 4,
            min_frames: 40,
            max_frames: 120,
            min_phonemes: 3,
            max_phonemes: 5,
            silence_frames: 8,
            n_speakers: 4,
            mel: MelConfig::default(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.n_phonemes < 2 || self.n_phonemes > 26 {
            return bad("n_phonemes must be in 2..=26");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 0 < min_frames <= max_frames");
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad("need 0 < min_phonemes <= max_phonemes");
        }
        if self.silence_frames == 0 || self.n_speakers == 0 {
            return bad("silence_frames and n_speakers must be positive");
        }
        self.mel.validate()
    }
}

/// `sil` followed by `A`, `B`, ... for `n` classes.
pub fn pseudo_phoneme_inventory(n: usize) -> Result<PhonemeInventory> {
    let symbols = std::iter::once("sil".to_string())
        .chain((0..n).map(|i| char::from(b'A' + i as u8).to_string()));
    PhonemeInventory::new(symbols, "sil")
}

fn resonance(f: f64, center: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((f - center) / width).powi(2))
}

struct Voice {
    pitch: f64,
    gain: f64,
}

/// Adds phoneme `class` over samples `[a, b)` of `out`. The tone fades in
/// and out with raised-cosine ramps of `fade` samples centred on `a` and `b`,
/// so neighbouring phonemes cross-fade instead of meeting at a click.
#[allow(clippy::too_many_arguments)]
fn render_phoneme(class: usize, voice: &Voice, a: usize, b: usize, fade: usize, sr: f64, out: &mut [f32]) {
    let f0 = FUNDAMENTALS[class % 8] * voice.pitch;
    let (f1, f2) = (FORMANT1[class % 8], FORMANT2[class % 8]);
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64)
        .take_while(|h| h * f0 < 5000.0)
        .map(|h| (h, resonance(h * f0, f1, 150.0) + 0.6 * resonance(h * f0, f2, 250.0) + 0.02))
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
    let half = fade / 2;
    let lo = a.saturating_sub(half);
    let hi = (b + half).min(out.len());
    let ramp = |x: f64| 0.5 - 0.5 * (PI * x.clamp(0.0, 1.0)).cos();
    // zero phase at the segment centre, so a segment's waveform depends only
    // on its class, speaker and duration
    let centre = (a + b) as f64 / 2.0;
    let step = 2.0 * PI * f0 / sr;
    for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let x = i as f64;
        let env = ramp((x - (a as f64 - half as f64)) / fade as f64) * ramp(((b + half) as f64 - x) / fade as f64);
        let phase = (x - centre) * step;
        let s: f64 = harmonics.iter().map(|&(h, a)| a * (h * phase).sin()).sum();
        *o += (0.5 * voice.gain * env * s / norm) as f32;
    }
}

/// Generates `n_items` utterances over `cfg.n_speakers` speakers. Same seed,
/// same corpus.
pub fn synth_corpus(seed: u64, n_items: usize, cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let inventory = pseudo_phoneme_inventory(cfg.n_phonemes)?;
    let sil = inventory.silence_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voices: Vec<Voice> = (0..cfg.n_speakers)
        .map(|_| Voice {
            pitch: rng.gen_range(0.92..=1.08),
            gain: rng.gen_range(0.8..=1.2),
        })
        .collect();
    let hop = cfg.mel.hop_size;
    let sr = cfg.mel.sample_rate as f64;
    let mut items = Vec::with_capacity(n_items);
    for idx in 0..n_items {
        let spk = idx % cfg.n_speakers;
        let voice = &voices[spk];
        let count = rng.gen_range(cfg.min_phonemes..=cfg.max_phonemes);
        let mut classes: Vec<usize> = Vec::with_capacity(count);
        while classes.len() < count {
            let c = rng.gen_range(1..=cfg.n_phonemes);
            if classes.last() != Some(&c) {
                classes.push(c);
            }
        }
        let mut phonemes = vec![sil];
        let mut starts = vec![0];
        let mut t = cfg.silence_frames;
        for &c in &classes {
            let d = rng.gen_range(cfg.min_frames..=cfg.max_frames);
            phonemes.push(c);
            starts.push(t);
            t += d;
        }
        phonemes.push(sil);
        starts.push(t);
        let total = t + cfg.silence_frames;
        // the last frame of a centered analysis has no samples of its own
        let n_samples = (total - 1) * hop;
        let mut samples = vec![0.0f32; n_samples];
        let fade = (FADE_SECS * sr) as usize;
        for (j, &p) in phonemes.iter().enumerate() {
            let a = starts[j] * hop;
            let b = if j + 1 == phonemes.len() { n_samples } else { starts[j + 1] * hop };
            if p == sil {
                samples[a..b]
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.002f32..=0.002));
            }
        }
        for (j, &p) in phonemes.iter().enumerate() {
            if p != sil {
                let (a, b) = (starts[j] * hop, starts[j + 1] * hop);
                render_phoneme(p - 1, voice, a, b, fade, sr, &mut samples);
            }
        }
        let segmentation = PhonemeSegmentation::new(phonemes, starts, total)?;
        let word = classes
            .iter()
            .map(|&c| inventory.symbol(c).to_ascii_lowercase())
            .collect::<String>();
        let gender = if voice.pitch >= 1.0 { Gender::Female } else { Gender::Male };
        items.push(CorpusItem::new(
            format!("spk{spk:02}/utt{idx:04}"),
            Waveform::new(samples, cfg.mel.sample_rate),
            segmentation,
            format!("spk{spk:02}"),
            gender,
            vec![word],
            cfg.mel,
        )?);
    }
    Ok(Corpus {
        inventory,
        mel_config: cfg.mel,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SynthConfig {
        SynthConfig {
            min_frames: 6,
            max_frames: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = synth_corpus(42, 6, &quick()).unwrap();
        let b = synth_corpus(42, 6, &quick()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_corpus(43, 6, &quick()).unwrap());
        for item in &a.items {
            let seg = &item.segmentation;
            assert_eq!(item.mel().n_frames, seg.total_frames());
            assert!((5..=7).contains(&seg.len()));
            for w in seg.phonemes().windows(2) {
                assert_ne!(w[0], w[1]);
            }
            for k in 1..seg.len() - 1 {
                assert!((6..=9).contains(&seg.duration(k).unwrap()));
            }
        }
    }

    #[test]
    fn classes_have_distinct_spectra() {
        let corpus = synth_corpus(1, 12, &quick()).unwrap();
        let n_mels = corpus.mel_config.n_mels;
        let mut sums = vec![vec![0.0; n_mels]; 5];
        let mut counts = [0usize; 5];
        for item in &corpus.items {
            let seg = &item.segmentation;
            for k in 0..seg.len() {
                let p = seg.phoneme(k);
                let mel = item.segment_mel(k).unwrap();
                for t in 0..mel.n_frames {
                    for (s, v) in sums[p].iter_mut().zip(mel.frame(t)) {
                        *s += v;
                    }
                }
                counts[p] += mel.n_frames;
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(counts)
            .map(|(s, c)| s.iter().map(|v| v / c.max(1) as f64).collect())
            .collect();
        for a in 1..5 {
            for b in a + 1..5 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum::<f64>() / n_mels as f64;
                assert!(d > 0.3, "classes {a} and {b} too close: {d}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            min_frames: 5,
            max_frames: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_corpus(0, 1, &cfg), Err(Error::InvalidConfig(_))));
    }
}

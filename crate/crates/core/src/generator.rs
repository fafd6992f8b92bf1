//! Phoneme-conditioned 1-D U-net that fills in a masked stretch of a
//! fixed-length mel window.
//!
//! ```text
//! in  = [mel | embed(label)]            T
//! e1  conv  in -> c1                     T     --------------+
//! e2  conv  c1 -> c2  stride 2           T/2                 |
//! e3  conv  c2 -> c3                     T/2   ---------+    |
//! e4  conv  c3 -> c4  stride 2           T/4            |    |
//! e5  conv  c4 -> c5                     T/4            |    |
//! d1  conv  c5 -> c4                     T/4            |    |
//! d2  up    c4 -> c3                     T/2            |    |
//! d3  conv  [d2 | e3] -> c2              T/2   <--------+    |
//! d4  up    c2 -> c1                     T                   |
//! d5  conv  [d4 | e1] -> c1              T     <-------------+
//! out 1x1   c1 -> n_mels                 T
//! ```
//!
//! Every layer but the last is followed by a PReLU. Inputs are normalized
//! with fixed per-bin statistics and the output is mapped back. Masked
//! frames (all bins exactly zero) enter the network as zeros.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{bind, load_checkpoint, save_checkpoint};
use crate::dsp::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::{Act, Conv1d, ConvCache, ConvTranspose1d, Embedding, PRelu, ParamStore};
use crate::problem::{FramePhonemeSequence, PhonemeInventory};

pub const CHECKPOINT_KIND: &str = "generator";
pub const DOWNSAMPLE: usize = 4;
/// Lower bound on normalization scale, in log-mel units.
pub const MIN_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub tau: usize,
    pub n_mels: usize,
    pub inventory: PhonemeInventory,
    pub phoneme_embed_dim: usize,
    pub channels: [usize; 5],
    pub mel: MelConfig,
    /// Per-bin statistics used to normalize inputs and denormalize outputs.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl GeneratorConfig {
    pub const DEFAULT_CHANNELS: [usize; 5] = [128, 256, 256, 512, 512];
    pub const DEFAULT_EMBED_DIM: usize = 32;

    /// Config with identity normalization; callers usually follow with
    /// [`GeneratorConfig::with_normalization`].
    pub fn new(tau: usize, inventory: PhonemeInventory, mel: MelConfig) -> Self {
        Self {
            tau,
            n_mels: mel.n_mels,
            inventory,
            phoneme_embed_dim: Self::DEFAULT_EMBED_DIM,
            channels: Self::DEFAULT_CHANNELS,
            mel,
            norm_mean: vec![0.0; mel.n_mels],
            norm_std: vec![1.0; mel.n_mels],
        }
    }

    /// Sets per-bin mean and standard deviation from example spectrograms.
    pub fn with_normalization<'a>(mut self, mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mean, std) = bin_statistics(self.n_mels, mels);
        self.norm_mean = mean;
        self.norm_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tau == 0 || self.tau % DOWNSAMPLE != 0 {
            return bad(format!("tau={} must be a positive multiple of {DOWNSAMPLE}", self.tau));
        }
        if self.phoneme_embed_dim == 0 {
            return bad("phoneme_embed_dim must be at least 1".into());
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.n_mels != self.mel.n_mels {
            return bad(format!("n_mels={} disagrees with the mel config", self.n_mels));
        }
        if self.norm_mean.len() != self.n_mels || self.norm_std.len() != self.n_mels {
            return bad("normalization vectors must have n_mels entries".into());
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("normalization std must be positive".into());
        }
        self.mel.validate()
    }
}

/// Smallest multiple of the U-net's downsampling factor that is `>= frames`.
pub fn round_tau(frames: usize) -> usize {
    frames.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

/// Per-bin mean and standard deviation (floored at [`MIN_STD`]).
pub fn bin_statistics<'a>(n_mels: usize, mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n_mels];
    let mut sq = vec![0.0; n_mels];
    let mut n = 0usize;
    for mel in mels {
        for t in 0..mel.n_frames {
            for (d, &v) in mel.frame(t).iter().enumerate() {
                sum[d] += v;
                sq[d] += v * v;
            }
        }
        n += mel.n_frames;
    }
    if n == 0 {
        return (vec![0.0; n_mels], vec![1.0; n_mels]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD))
        .collect();
    (mean, std)
}

#[derive(Debug, Clone, Copy)]
struct Net {
    embed: Embedding,
    convs: [Conv1d; 5],
    acts: [PRelu; 10],
    d1: Conv1d,
    d2: ConvTranspose1d,
    d3: Conv1d,
    d4: ConvTranspose1d,
    d5: Conv1d,
    out: Conv1d,
}

/// Generator layout plus its parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    net: Net,
    pub params: ParamStore,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    labels: Vec<usize>,
    /// Pre-activation outputs of the 10 PReLU-activated layers.
    pre: Vec<Act>,
    convs: Vec<ConvCache>,
}

impl Generator {
    /// Deterministic fan-in uniform initialization; PReLU slopes start at 0.25.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [c1, c2, c3, c4, c5] = config.channels;
        let input = config.n_mels + config.phoneme_embed_dim;
        let embed = Embedding::new(&mut s, "embed", config.inventory.len(), config.phoneme_embed_dim, &mut rng);
        let convs = [
            Conv1d::new(&mut s, "enc1", input, c1, 3, 1, &mut rng),
            Conv1d::new(&mut s, "enc2", c1, c2, 3, 2, &mut rng),
            Conv1d::new(&mut s, "enc3", c2, c3, 3, 1, &mut rng),
            Conv1d::new(&mut s, "enc4", c3, c4, 3, 2, &mut rng),
            Conv1d::new(&mut s, "enc5", c4, c5, 3, 1, &mut rng),
        ];
        let d1 = Conv1d::new(&mut s, "dec1", c5, c4, 3, 1, &mut rng);
        let d2 = ConvTranspose1d::new(&mut s, "dec2", c4, c3, &mut rng);
        let d3 = Conv1d::new(&mut s, "dec3", 2 * c3, c2, 3, 1, &mut rng);
        let d4 = ConvTranspose1d::new(&mut s, "dec4", c2, c1, &mut rng);
        let d5 = Conv1d::new(&mut s, "dec5", 2 * c1, c1, 3, 1, &mut rng);
        let out = Conv1d::new(&mut s, "out", c1, config.n_mels, 1, 1, &mut rng);
        let widths = [c1, c2, c3, c4, c5, c4, c3, c2, c1, c1];
        let acts = std::array::from_fn(|i| PRelu::new(&mut s, &format!("act{}", i + 1), widths[i]));
        Ok(Self {
            config,
            net: Net {
                embed,
                convs,
                acts,
                d1,
                d2,
                d3,
                d4,
                d5,
                out,
            },
            params: s,
        })
    }

    pub fn tau(&self) -> usize {
        self.config.tau
    }

    pub fn embedding_shape(&self) -> (usize, usize) {
        (self.net.embed.count, self.net.embed.dim)
    }

    fn check_inputs(&self, masked: &MelSpectrogram, labels: &FramePhonemeSequence) -> Result<()> {
        let cfg = &self.config;
        if masked.n_frames != cfg.tau || masked.n_mels != cfg.n_mels {
            return Err(Error::shape(
                format!("{}x{} mel window", cfg.tau, cfg.n_mels),
                format!("{}x{}", masked.n_frames, masked.n_mels),
            ));
        }
        if labels.len() != cfg.tau {
            return Err(Error::shape(format!("{} labels", cfg.tau), labels.len()));
        }
        if let Some(&bad) = labels.labels.iter().find(|&&l| l >= cfg.inventory.len()) {
            return Err(Error::InvalidPhoneme(format!(
                "label {bad} outside inventory of {}",
                cfg.inventory.len()
            )));
        }
        Ok(())
    }

    /// Fills the masked window using this generator's parameters.
    pub fn generate(&self, masked: &MelSpectrogram, labels: &FramePhonemeSequence) -> Result<MelSpectrogram> {
        self.check_inputs(masked, labels)?;
        Ok(self.forward(&self.params.values, masked, &labels.labels).0)
    }

    /// Forward pass with explicit parameters (used by training and
    /// gradient checks). Inputs must already be validated.
    pub fn forward(&self, p: &[f64], masked: &MelSpectrogram, labels: &[usize]) -> (MelSpectrogram, GeneratorCache) {
        let net = &self.net;
        let cfg = &self.config;
        let mut x = Act::zeros(masked.n_frames, cfg.n_mels);
        for t in 0..masked.n_frames {
            let frame = masked.frame(t);
            // masked frames stay zero after normalization
            if frame.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (d, (o, &v)) in x.row_mut(t).iter_mut().zip(frame).enumerate() {
                *o = (v - cfg.norm_mean[d]) / cfg.norm_std[d];
            }
        }
        let x = x.concat(&net.embed.forward(p, labels));
        let mut pre = Vec::with_capacity(10);
        let mut caches = Vec::with_capacity(11);
        let mut step = |layer: usize, y: (Act, ConvCache), pre: &mut Vec<Act>| -> Act {
            caches.push(y.1);
            let a = net.acts[layer].forward(p, &y.0);
            pre.push(y.0);
            a
        };
        let e1 = step(0, net.convs[0].forward(p, &x), &mut pre);
        let e2 = step(1, net.convs[1].forward(p, &e1), &mut pre);
        let e3 = step(2, net.convs[2].forward(p, &e2), &mut pre);
        let e4 = step(3, net.convs[3].forward(p, &e3), &mut pre);
        let e5 = step(4, net.convs[4].forward(p, &e4), &mut pre);
        let h = step(5, net.d1.forward(p, &e5), &mut pre);
        let h = step(6, net.d2.forward(p, &h), &mut pre);
        let h = step(7, net.d3.forward(p, &h.concat(&e3)), &mut pre);
        let h = step(8, net.d4.forward(p, &h), &mut pre);
        let h = step(9, net.d5.forward(p, &h.concat(&e1)), &mut pre);
        let (y, out_cache) = net.out.forward(p, &h);
        caches.push(out_cache);
        let mut mel = MelSpectrogram::filled(y.frames, cfg.n_mels, 0.0);
        for t in 0..y.frames {
            for (d, (o, &v)) in mel.frame_mut(t).iter_mut().zip(y.row(t)).enumerate() {
                *o = v * cfg.norm_std[d] + cfg.norm_mean[d];
            }
        }
        (
            mel,
            GeneratorCache {
                labels: labels.to_vec(),
                pre,
                convs: caches,
            },
        )
    }

    /// Accumulates parameter gradients of a scalar loss into `grads`, given
    /// `d_out` = dLoss/dOutput (same layout as the output mel).
    pub fn backward(&self, p: &[f64], grads: &mut [f64], cache: &GeneratorCache, d_out: &MelSpectrogram) {
        let net = &self.net;
        let cfg = &self.config;
        let c = &cache.convs;
        let mut dy = Act::zeros(d_out.n_frames, cfg.n_mels);
        for t in 0..d_out.n_frames {
            for (d, (o, &v)) in dy.row_mut(t).iter_mut().zip(d_out.frame(t)).enumerate() {
                *o = v * cfg.norm_std[d];
            }
        }
        let act = |i: usize, grads: &mut [f64], da: &Act| net.acts[i].backward(p, grads, &cache.pre[i], da);

        let dh = net.out.backward(p, grads, &c[10], &dy);
        let dh = act(9, grads, &dh);
        let (dh, mut de1) = net.d5.backward(p, grads, &c[9], &dh).split(cfg.channels[0]);
        let dh = act(8, grads, &dh);
        let dh = net.d4.backward(p, grads, &c[8], &dh);
        let dh = act(7, grads, &dh);
        let (dh, mut de3) = net.d3.backward(p, grads, &c[7], &dh).split(cfg.channels[2]);
        let dh = act(6, grads, &dh);
        let dh = net.d2.backward(p, grads, &c[6], &dh);
        let dh = act(5, grads, &dh);
        let dh = net.d1.backward(p, grads, &c[5], &dh);
        let dh = act(4, grads, &dh);
        let dh = net.convs[4].backward(p, grads, &c[4], &dh);
        let dh = act(3, grads, &dh);
        let dh = net.convs[3].backward(p, grads, &c[3], &dh);
        de3.add_assign(&dh);
        let dh = act(2, grads, &de3);
        let dh = net.convs[2].backward(p, grads, &c[2], &dh);
        let dh = act(1, grads, &dh);
        let dh = net.convs[1].backward(p, grads, &c[1], &dh);
        de1.add_assign(&dh);
        let dh = act(0, grads, &de1);
        let dx = net.convs[0].backward(p, grads, &c[0], &dh);
        let (_, demb) = dx.split(cfg.n_mels);
        net.embed.backward(grads, &cache.labels, &demb);
    }

    pub fn save(&self, dir: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        save_checkpoint(dir.as_ref(), CHECKPOINT_KIND, &self.config, &self.params, metadata)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let raw = load_checkpoint::<GeneratorConfig>(dir.as_ref(), CHECKPOINT_KIND)?;
        let mut g = Generator::new(raw.config, 0)?;
        bind(&mut g.params, &raw.manifest, raw.values)?;
        Ok(g)
    }
}

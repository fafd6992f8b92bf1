//! Siamese acoustic phoneme embedder: a bidirectional GRU over mel frames,
//! final states of both directions concatenated, then Linear + ReLU.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{bind, load_checkpoint, save_checkpoint};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::generator::bin_statistics;
use crate::nn::{Act, BiGru, BiGruCache, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "siamese";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl SiameseConfig {
    pub const DEFAULT_HIDDEN: usize = 300;
    pub const DEFAULT_EMBED_DIM: usize = 128;

    pub fn new(n_mels: usize) -> Self {
        Self {
            n_mels,
            hidden: Self::DEFAULT_HIDDEN,
            embed_dim: Self::DEFAULT_EMBED_DIM,
            norm_mean: vec![0.0; n_mels],
            norm_std: vec![1.0; n_mels],
        }
    }

    pub fn with_normalization<'a>(mut self, mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mean, std) = bin_statistics(self.n_mels, mels);
        self.norm_mean = mean;
        self.norm_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("siamese dimensions must be positive".into()));
        }
        if self.norm_mean.len() != self.n_mels || self.norm_std.len() != self.n_mels {
            return Err(Error::InvalidConfig("normalization vectors must have n_mels entries".into()));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("normalization std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Siamese {
    pub config: SiameseConfig,
    gru: BiGru,
    proj: Linear,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    x: Act,
    gru: BiGruCache,
    state: Vec<f64>,
    pre: Vec<f64>,
}

/// Cosine similarity; `zero_vector` flags that one side had zero norm, in
/// which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub zero_vector: bool,
}

const ZERO_NORM: f64 = 1e-12;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Similarity {
    assert_eq!(u.len(), v.len(), "embedding dimensions differ");
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu <= ZERO_NORM || nv <= ZERO_NORM {
        return Similarity {
            value: 0.0,
            zero_vector: true,
        };
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Similarity {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        zero_vector: false,
    }
}

/// Gradient of `cos(u, v)` with respect to `u`; zero when either norm is zero.
pub fn cosine_grad_u(u: &[f64], v: &[f64]) -> Vec<f64> {
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu <= ZERO_NORM || nv <= ZERO_NORM {
        return vec![0.0; u.len()];
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = dot / (nu * nv);
    u.iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - c * a / (nu * nu))
        .collect()
}

impl Siamese {
    pub fn new(config: SiameseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gru = BiGru::new(&mut params, "gru", config.n_mels, config.hidden, &mut rng);
        let proj = Linear::new(&mut params, "proj", 2 * config.hidden, config.embed_dim, &mut rng);
        Ok(Self {
            config,
            gru,
            proj,
            params,
        })
    }

    pub fn projection_shape(&self) -> (usize, usize) {
        (self.proj.in_features, self.proj.out_features)
    }

    pub fn embed(&self, segment: &MelSpectrogram) -> Result<Vec<f64>> {
        Ok(self.embed_with(&self.params.values, segment)?.0)
    }

    pub fn embed_with(&self, p: &[f64], segment: &MelSpectrogram) -> Result<(Vec<f64>, EmbedCache)> {
        let cfg = &self.config;
        if segment.n_frames == 0 {
            return Err(Error::EmptySegment);
        }
        if segment.n_mels != cfg.n_mels {
            return Err(Error::shape(format!("{} mel bins", cfg.n_mels), segment.n_mels));
        }
        let mut x = Act::zeros(segment.n_frames, cfg.n_mels);
        for t in 0..segment.n_frames {
            for (d, (o, &v)) in x.row_mut(t).iter_mut().zip(segment.frame(t)).enumerate() {
                *o = (v - cfg.norm_mean[d]) / cfg.norm_std[d];
            }
        }
        let (state, gru) = self.gru.forward(p, &x);
        let pre = self.proj.forward(p, &state);
        let out = pre.iter().map(|&v| v.max(0.0)).collect();
        Ok((out, EmbedCache { x, gru, state, pre }))
    }

    /// Accumulates parameter gradients given dLoss/dEmbedding and returns
    /// dLoss/dSegment.
    pub fn backward(&self, p: &[f64], grads: &mut [f64], cache: &EmbedCache, d_emb: &[f64]) -> MelSpectrogram {
        let d_pre: Vec<f64> = d_emb
            .iter()
            .zip(&cache.pre)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();
        let d_state = self.proj.backward(p, grads, &cache.state, &d_pre);
        let dx = self.gru.backward(p, grads, &cache.x, &cache.gru, &d_state);
        let mut d_seg = MelSpectrogram::filled(dx.frames, self.config.n_mels, 0.0);
        for t in 0..dx.frames {
            for (d, (o, &v)) in d_seg.frame_mut(t).iter_mut().zip(dx.row(t)).enumerate() {
                *o = v / self.config.norm_std[d];
            }
        }
        d_seg
    }

    pub fn save(&self, dir: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        save_checkpoint(dir.as_ref(), CHECKPOINT_KIND, &self.config, &self.params, metadata)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let raw = load_checkpoint::<SiameseConfig>(dir.as_ref(), CHECKPOINT_KIND)?;
        let mut s = Siamese::new(raw.config, 0)?;
        bind(&mut s.params, &raw.manifest, raw.values)?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Siamese {
        Siamese::new(
            SiameseConfig {
                hidden: 5,
                embed_dim: 6,
                ..SiameseConfig::new(4)
            },
            1,
        )
        .unwrap()
    }

    fn random_mel(frames: usize, n_mels: usize, rng: &mut ChaCha8Rng) -> MelSpectrogram {
        let data = (0..frames * n_mels).map(|_| rng.gen_range(-2.0..2.0)).collect();
        MelSpectrogram::new(frames, n_mels, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 0.0];
        let v = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        assert!((cosine_similarity(&u, &v).value - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_similarity(&u, &u).value, 1.0);
        assert_eq!(cosine_similarity(&u, &[0.0, 1.0]).value, 0.0);
        let z = cosine_similarity(&u, &[0.0, 0.0]);
        assert!(z.zero_vector && z.value == 0.0);
        let a = [0.3, -1.2, 2.0];
        let b = [1.5, 0.2, -0.7];
        let scaled: Vec<f64> = a.iter().map(|x| x * 3.7).collect();
        assert!((cosine_similarity(&a, &b).value - cosine_similarity(&b, &a).value).abs() < 1e-15);
        assert!((cosine_similarity(&scaled, &b).value - cosine_similarity(&a, &b).value).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let u = [0.3, -1.2, 2.0];
        let v = [1.5, 0.2, -0.7];
        let g = cosine_grad_u(&u, &v);
        for i in 0..3 {
            let mut up = u;
            up[i] += 1e-6;
            let mut dn = u;
            dn[i] -= 1e-6;
            let fd = (cosine_similarity(&up, &v).value - cosine_similarity(&dn, &v).value) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn embed_contract() {
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = random_mel(7, 4, &mut rng);
        let e = s.embed(&seg).unwrap();
        assert_eq!(e.len(), 6);
        assert!(e.iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert_eq!(e, s.embed(&seg).unwrap());
        assert!(matches!(
            s.embed(&MelSpectrogram::filled(0, 4, 0.0)),
            Err(Error::EmptySegment)
        ));
        let full = Siamese::new(SiameseConfig::new(80), 0).unwrap();
        assert_eq!(full.projection_shape(), (600, 128));
        assert_eq!(full.params, Siamese::new(SiameseConfig::new(80), 0).unwrap().params);
    }

    #[test]
    fn fresh_similarities_are_spread() {
        let s = Siamese::new(
            SiameseConfig {
                hidden: 16,
                embed_dim: 16,
                ..SiameseConfig::new(8)
            },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sims: Vec<f64> = (0..100)
            .map(|_| {
                let a = random_mel(rng.gen_range(3..12), 8, &mut rng);
                let b = random_mel(rng.gen_range(3..12), 8, &mut rng);
                cosine_similarity(&s.embed(&a).unwrap(), &s.embed(&b).unwrap()).value
            })
            .collect();
        let lo = sims.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 0.05, "range {lo}..{hi}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = random_mel(5, 4, &mut rng);
        let probe: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obj = |p: &[f64], m: &MelSpectrogram| -> f64 {
            let (e, _) = s.embed_with(p, m).unwrap();
            e.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = s.embed_with(&s.params.values, &seg).unwrap();
        let mut grads = s.params.zeros_like();
        let dseg = s.backward(&s.params.values, &mut grads, &cache, &probe);
        let eps = 1e-6;
        for i in 0..s.params.len() {
            let mut p = s.params.values.clone();
            p[i] += eps;
            let up = obj(&p, &seg);
            p[i] -= 2.0 * eps;
            let fd = (up - obj(&p, &seg)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}");
        }
        for i in 0..seg.data.len() {
            let mut m = seg.clone();
            m.data[i] += eps;
            let up = obj(&s.params.values, &m);
            m.data[i] -= 2.0 * eps;
            let fd = (up - obj(&s.params.values, &m)) / (2.0 * eps);
            assert!((fd - dseg.data[i]).abs() < 1e-6, "input {i}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut s = small();
        crate::checkpoint::quantize_f32(&mut s.params);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), serde_json::Value::Null).unwrap();
        let t = Siamese::load(dir.path()).unwrap();
        assert_eq!(s.params, t.params);
        assert!(crate::generator::Generator::load(dir.path()).is_err());
    }
}

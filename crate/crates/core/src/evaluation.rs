//! Objective stand-ins for listening tests: an embedding-space phoneme
//! oracle, spectral distances, the minimal-pair experiment and stimulus
//! manifests for running the human version elsewhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{segment_samples, select_donor, smooth_concat, ConcatConfig, DonorQuery};
use crate::corpus::CorpusItem;
use crate::correction::{correct_mel, Vocoder, DEFAULT_BLEND};
use crate::dsp::{write_wav, MelSpectrogram, Waveform};
use crate::embedding::{cosine_similarity, Siamese};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::problem::{PhonemeInventory, WindowSpec};

pub const REPORT_DISCLAIMER: &str = "Rates come from an automatic embedding-space phoneme classifier, not from \
human listeners, and are not comparable with human rating studies.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    /// Element-mean absolute difference.
    pub l1: f64,
    /// `||a - b||_F / ||b||_F`.
    pub spectral_convergence: f64,
}

/// Distances between `a` and reference `b`, over the whole matrix or over
/// the frames of `region`.
pub fn spectral_metrics(a: &MelSpectrogram, b: &MelSpectrogram, region: Option<&WindowSpec>) -> Result<SpectralMetrics> {
    a.same_shape(b)?;
    let (lo, hi) = match region {
        Some(w) if w.utterance_end() <= a.n_frames => (w.utterance_start, w.utterance_end()),
        Some(w) => {
            return Err(Error::WindowTooLong {
                tau: w.length,
                total_frames: a.n_frames,
            })
        }
        None => (0, a.n_frames),
    };
    let d = a.n_mels;
    let (xa, xb) = (&a.data[lo * d..hi * d], &b.data[lo * d..hi * d]);
    if xa.is_empty() {
        return Ok(SpectralMetrics {
            l1: 0.0,
            spectral_convergence: 0.0,
        });
    }
    let l1 = xa.iter().zip(xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / xa.len() as f64;
    let diff = xa.iter().zip(xb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = xb.iter().map(|y| y * y).sum::<f64>().sqrt();
    let spectral_convergence = if diff == 0.0 { 0.0 } else { diff / norm };
    Ok(SpectralMetrics {
        l1,
        spectral_convergence,
    })
}

/// Per-phoneme mean embedding of every segment in `items`.
pub fn phoneme_centroids(siamese: &Siamese, items: &[&CorpusItem]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for item in items {
        for k in 0..item.segmentation.len() {
            let e = siamese.embed(&item.segment_mel(k)?)?;
            let entry = sums
                .entry(item.segmentation.phoneme(k))
                .or_insert_with(|| (vec![0.0; e.len()], 0));
            entry.0.iter_mut().zip(&e).for_each(|(s, v)| *s += v);
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(p, (s, n))| (p, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Nearest centroid by cosine similarity. Centroids are visited in
/// inventory order and only a strictly better match replaces the current
/// one, so ties go to the earlier phoneme.
pub fn phoneme_identity_score(
    segment: &MelSpectrogram,
    siamese: &Siamese,
    centroids: &BTreeMap<usize, Vec<f64>>,
) -> Result<(usize, f64)> {
    if segment.n_frames == 0 {
        return Err(Error::EmptySegment);
    }
    if centroids.is_empty() {
        return Err(Error::InvalidConfig("no phoneme centroids".into()));
    }
    let e = siamese.embed(segment)?;
    let mut best: Option<(usize, f64)> = None;
    for (&p, c) in centroids {
        let s = cosine_similarity(&e, c).value;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((p, s));
        }
    }
    Ok(best.expect("centroids is non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Original audio passed through the vocoder, nothing substituted.
    VocoderOnly,
    Generated,
    SmoothConcat,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::VocoderOnly, Condition::Generated, Condition::SmoothConcat];

    pub fn name(self) -> &'static str {
        match self {
            Condition::VocoderOnly => "vocoder_only",
            Condition::Generated => "generated",
            Condition::SmoothConcat => "smooth_concat",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub n: usize,
    pub correct: usize,
    pub switched: usize,
    pub none: usize,
    pub accuracy: f64,
    pub switched_rate: f64,
    pub none_rate: f64,
    /// Mean L1 over window frames outside the corrected phoneme, when the
    /// condition keeps the frame grid.
    pub context_l1: Option<f64>,
    pub spectral_convergence: Option<f64>,
    #[serde(skip)]
    sums: (f64, usize, f64, usize),
}

impl ConditionMetrics {
    fn record(&mut self, outcome: Outcome, context_l1: Option<f64>, convergence: Option<f64>) {
        self.n += 1;
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Switched => self.switched += 1,
            Outcome::None => self.none += 1,
        }
        if let Some(v) = context_l1 {
            self.sums.0 += v;
            self.sums.1 += 1;
        }
        if let Some(v) = convergence {
            self.sums.2 += v;
            self.sums.3 += 1;
        }
    }

    fn finish(&mut self) {
        let rate = |c: usize| if self.n == 0 { 0.0 } else { c as f64 / self.n as f64 };
        self.accuracy = rate(self.correct);
        self.switched_rate = rate(self.switched);
        self.none_rate = rate(self.none);
        self.context_l1 = (self.sums.1 > 0).then(|| self.sums.0 / self.sums.1 as f64);
        self.spectral_convergence = (self.sums.3 > 0).then(|| self.sums.2 / self.sums.3 as f64);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Correct,
    Switched,
    None,
}

fn outcome(predicted: usize, intended: usize, other: usize) -> Outcome {
    if predicted == intended {
        Outcome::Correct
    } else if predicted == other {
        Outcome::Switched
    } else {
        Outcome::None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub disclaimer: String,
    pub conditions: BTreeMap<Condition, ConditionMetrics>,
    /// Rows per requested target phoneme.
    pub per_target: BTreeMap<String, BTreeMap<Condition, ConditionMetrics>>,
    /// Occurrences left out of the splice condition for lack of a donor.
    pub missing_donors: usize,
}

impl EvalReport {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "> {}\n", self.disclaimer);
        let header = |md: &mut String| {
            let _ = write!(md, "| |");
            for c in Condition::ALL {
                let _ = write!(md, " {} |", c.name());
            }
            let _ = writeln!(md, "\n|---|---|---|---|");
        };
        header(&mut md);
        let cell = |m: Option<&ConditionMetrics>, f: &dyn Fn(&ConditionMetrics) -> String| {
            m.map(f).unwrap_or_else(|| "-".into())
        };
        type Row<'a> = (&'a str, &'a dyn Fn(&ConditionMetrics) -> String);
        let rows: [Row; 6] = [
            ("n", &|m| m.n.to_string()),
            ("accuracy", &|m| format!("{:.1}%", 100.0 * m.accuracy)),
            ("switched", &|m| format!("{:.1}%", 100.0 * m.switched_rate)),
            ("none of the above", &|m| format!("{:.1}%", 100.0 * m.none_rate)),
            ("context L1", &|m| m.context_l1.map_or("-".into(), |v| format!("{v:.4}"))),
            ("spectral convergence", &|m| {
                m.spectral_convergence.map_or("-".into(), |v| format!("{v:.4}"))
            }),
        ];
        for (name, f) in rows {
            let _ = write!(md, "| {name} |");
            for c in Condition::ALL {
                let _ = write!(md, " {} |", cell(self.conditions.get(&c), f));
            }
            let _ = writeln!(md);
        }
        for (target, conds) in &self.per_target {
            let _ = write!(md, "| accuracy, target {target} |");
            for c in Condition::ALL {
                let v = cell(conds.get(&c), &|m| format!("{:.1}%", 100.0 * m.accuracy));
                let _ = write!(md, " {v} |");
            }
            let _ = writeln!(md);
        }
        md
    }
}

pub struct ExperimentModels<'a> {
    pub generator: &'a Generator,
    pub siamese: &'a Siamese,
    pub centroids: &'a BTreeMap<usize, Vec<f64>>,
    pub vocoder: &'a Vocoder,
}

/// For every test occurrence of `p` and each pair `(p, q)`: the vocoded
/// original, the generated correction towards `q` and the donor splice
/// towards `q` are re-analysed from audio and classified by the oracle.
/// `donors` is searched for the splice baseline.
pub fn run_minimal_pair_experiment(
    test: &[&CorpusItem],
    donors: &[&CorpusItem],
    inventory: &PhonemeInventory,
    pairs: &[(usize, usize)],
    models: &ExperimentModels,
    concat: &ConcatConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        disclaimer: REPORT_DISCLAIMER.to_string(),
        ..EvalReport::default()
    };
    let analyzer = models.vocoder.analyzer();
    let hop = analyzer.config().hop_size;
    let mut donor_seed = seed;
    for &(p, q) in pairs {
        let occurrences: Vec<(&CorpusItem, usize)> = test
            .iter()
            .flat_map(|it| it.segmentation.occurrences(p).map(move |k| (*it, k)))
            .collect();
        if occurrences.is_empty() {
            return Err(Error::PhonemeAbsent(inventory.symbol(p).to_string()));
        }
        let row = report.per_target.entry(inventory.symbol(q).to_string()).or_default();
        for (item, k) in occurrences {
            let mel = item.mel();
            let seg = &item.segmentation;
            let (s, e) = seg.segment(k)?;
            let mut record = |c: Condition, o: Outcome, ctx: Option<f64>, sc: Option<f64>| {
                report.conditions.entry(c).or_default().record(o, ctx, sc);
                row.entry(c).or_default().record(o, ctx, sc);
            };

            let vocoded = analyzer.analyze(&models.vocoder.vocode(mel)?)?;
            let (pred, _) = phoneme_identity_score(&vocoded.slice_frames(s, e), models.siamese, models.centroids)?;
            let sc = spectral_metrics(&vocoded, mel, None)?.spectral_convergence;
            record(Condition::VocoderOnly, outcome(pred, p, q), None, Some(sc));

            let (corrected, window, _) = correct_mel(mel, seg, k, q, DEFAULT_BLEND, models.generator)?;
            let audio = analyzer.analyze(&models.vocoder.vocode(&corrected)?)?;
            let (pred, _) = phoneme_identity_score(&audio.slice_frames(s, e), models.siamese, models.centroids)?;
            let ctx = context_l1(&corrected, mel, &window);
            let sc = spectral_metrics(&audio, mel, None)?.spectral_convergence;
            record(Condition::Generated, outcome(pred, q, p), Some(ctx), Some(sc));

            let query = DonorQuery {
                target_phoneme: q,
                gender: item.gender,
                preferred_word: None,
            };
            donor_seed = donor_seed.wrapping_add(1);
            let (donor_id, dk) = match select_donor(donors, inventory, &query, &item.speaker_id, donor_seed) {
                Ok(d) => d,
                Err(Error::NoDonor(_)) => {
                    report.missing_donors += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let donor = donors
                .iter()
                .find(|d| d.id == donor_id)
                .expect("selected donor comes from the pool");
            let donor_audio = segment_samples(&donor.waveform, &donor.segmentation, dk, hop)?;
            let spliced = smooth_concat(&item.waveform, seg, k, &donor_audio, hop, concat)?;
            let spliced_mel = analyzer.analyze(&spliced.waveform)?;
            let a = ((s * hop) as isize + spliced.offset).max(0) as usize;
            let lo = a.div_ceil(hop);
            let hi = ((a + donor_audio.len()) / hop).min(spliced_mel.n_frames).max(lo + 1);
            let (pred, _) = phoneme_identity_score(&spliced_mel.slice_frames(lo, hi), models.siamese, models.centroids)?;
            record(Condition::SmoothConcat, outcome(pred, q, p), None, None);
        }
    }
    report.conditions.values_mut().for_each(ConditionMetrics::finish);
    report
        .per_target
        .values_mut()
        .flat_map(|m| m.values_mut())
        .for_each(ConditionMetrics::finish);
    Ok(report)
}

/// Mean L1 over the window frames that are not part of the masked phoneme.
pub fn context_l1(a: &MelSpectrogram, b: &MelSpectrogram, window: &WindowSpec) -> f64 {
    let (lo, hi) = window.masked_utterance_range();
    let frames: Vec<usize> = (window.utterance_start..window.utterance_end())
        .filter(|t| !(lo..hi).contains(t))
        .collect();
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .iter()
        .flat_map(|&t| a.frame(t).iter().zip(b.frame(t)).map(|(x, y)| (x - y).abs()))
        .sum();
    total / (frames.len() * a.n_mels) as f64
}

/// One stimulus for a listening test.
#[derive(Debug, Clone)]
pub struct Stimulus {
    pub id: String,
    pub condition: String,
    pub target_word: String,
    pub minimal_pair_word: String,
    /// Unrelated word offered as an attention check.
    pub control_word: String,
    pub audio: Waveform,
    /// Reference recording for conditional MOS, if any.
    pub reference: Option<Waveform>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionRole {
    Target,
    MinimalPair,
    Control,
    NoneOfTheAbove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbxOption {
    pub label: String,
    pub role: OptionRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbxTask {
    pub stimulus_id: String,
    pub condition: String,
    pub audio: PathBuf,
    pub options: Vec<AbxOption>,
    /// `options[i]` is canonical option `option_order[i]`, where the
    /// canonical order is target, minimal pair, control, none of the above.
    pub option_order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosPair {
    pub stimulus_id: String,
    pub reference: PathBuf,
    pub candidate: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListeningManifest {
    pub disclaimer: String,
    pub seed: u64,
    pub abx_tasks: Vec<AbxTask>,
    pub mos_pairs: Vec<MosPair>,
}

pub const LISTENING_MANIFEST: &str = "listening_manifest.json";

pub const NONE_OF_THE_ABOVE: &str = "none of the above";

/// JSON schema the written manifest conforms to.
pub const LISTENING_MANIFEST_SCHEMA: &str = r#"{
  "$schema": "http://json-schema.org/draft-07/schema#",
  "type": "object",
  "required": ["disclaimer", "seed", "abx_tasks", "mos_pairs"],
  "properties": {
    "disclaimer": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "abx_tasks": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["stimulus_id", "condition", "audio", "options", "option_order"],
        "properties": {
          "stimulus_id": {"type": "string"},
          "condition": {"type": "string"},
          "audio": {"type": "string"},
          "options": {
            "type": "array", "minItems": 4, "maxItems": 4,
            "items": {
              "type": "object",
              "required": ["label", "role"],
              "properties": {
                "label": {"type": "string"},
                "role": {"enum": ["target", "minimal_pair", "control", "none_of_the_above"]}
              }
            }
          },
          "option_order": {
            "type": "array", "minItems": 4, "maxItems": 4,
            "items": {"type": "integer", "minimum": 0, "maximum": 3}
          }
        }
      }
    },
    "mos_pairs": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["stimulus_id", "reference", "candidate"],
        "properties": {
          "stimulus_id": {"type": "string"},
          "reference": {"type": "string"},
          "candidate": {"type": "string"}
        }
      }
    }
  }
}"#;

/// Writes every stimulus (and reference) as WAV under `out_dir` and a
/// manifest of ABX tasks with seed-shuffled options plus MOS pairs.
pub fn export_listening_manifest(stimuli: &[Stimulus], out_dir: impl AsRef<Path>, seed: u64) -> Result<ListeningManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = ListeningManifest {
        disclaimer: REPORT_DISCLAIMER.to_string(),
        seed,
        abx_tasks: Vec::new(),
        mos_pairs: Vec::new(),
    };
    for st in stimuli {
        let audio = PathBuf::from(format!("{}.wav", st.id));
        write_wav(out_dir.join(&audio), &st.audio)?;
        let canonical = [
            AbxOption {
                label: st.target_word.clone(),
                role: OptionRole::Target,
            },
            AbxOption {
                label: st.minimal_pair_word.clone(),
                role: OptionRole::MinimalPair,
            },
            AbxOption {
                label: st.control_word.clone(),
                role: OptionRole::Control,
            },
            AbxOption {
                label: NONE_OF_THE_ABOVE.to_string(),
                role: OptionRole::NoneOfTheAbove,
            },
        ];
        let mut order: Vec<usize> = (0..canonical.len()).collect();
        order.shuffle(&mut rng);
        manifest.abx_tasks.push(AbxTask {
            stimulus_id: st.id.clone(),
            condition: st.condition.clone(),
            audio: audio.clone(),
            options: order.iter().map(|&i| canonical[i].clone()).collect(),
            option_order: order,
        });
        if let Some(reference) = &st.reference {
            let path = PathBuf::from(format!("{}.reference.wav", st.id));
            write_wav(out_dir.join(&path), reference)?;
            manifest.mos_pairs.push(MosPair {
                stimulus_id: st.id.clone(),
                reference: path,
                candidate: audio,
            });
        }
    }
    fs::write(out_dir.join(LISTENING_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_metrics_by_hand() {
        let b = MelSpectrogram::filled(2, 2, 1.0);
        let a = MelSpectrogram::filled(2, 2, 2.0);
        let m = spectral_metrics(&a, &b, None).unwrap();
        assert_eq!((m.l1, m.spectral_convergence), (1.0, 1.0));
        assert_eq!(
            spectral_metrics(&b, &b, None).unwrap(),
            SpectralMetrics {
                l1: 0.0,
                spectral_convergence: 0.0
            }
        );
    }

    #[test]
    fn outcome_classes() {
        assert_eq!(outcome(2, 2, 1), Outcome::Correct);
        assert_eq!(outcome(1, 2, 1), Outcome::Switched);
        assert_eq!(outcome(3, 2, 1), Outcome::None);
    }
}

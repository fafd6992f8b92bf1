//! Aligned speech corpora: on-disk ingestion, a deterministic synthetic
//! corpus, train/validation splits and phoneme-instance sampling.

mod alignment;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, mel_spectrogram, resample, write_wav, MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::problem::{PhonemeInventory, PhonemeSegmentation};

pub use alignment::{format_alignment_csv, parse_alignment_csv, parse_textgrid, RawAlignment};
pub use synth::{pseudo_phoneme_inventory, synth_corpus, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Gender {
        match s.trim() {
            "M" | "m" => Gender::Male,
            "F" | "f" => Gender::Female,
            _ => Gender::Unknown,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
            Gender::Unknown => "unknown",
        }
    }
}

/// One aligned utterance. The mel spectrogram is computed on first use.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub waveform_path: Option<PathBuf>,
    pub waveform: Waveform,
    pub segmentation: PhonemeSegmentation,
    pub speaker_id: String,
    pub gender: Gender,
    pub word_transcript: Vec<String>,
    /// Belongs to the corpus' own test partition.
    pub held_out: bool,
    mel_config: MelConfig,
    mel: OnceLock<MelSpectrogram>,
}

impl PartialEq for CorpusItem {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.waveform_path == other.waveform_path
            && self.waveform == other.waveform
            && self.segmentation == other.segmentation
            && self.speaker_id == other.speaker_id
            && self.gender == other.gender
            && self.word_transcript == other.word_transcript
            && self.held_out == other.held_out
            && self.mel_config == other.mel_config
    }
}

/// Frame count of the centered analysis of `n_samples`.
pub fn frame_count(n_samples: usize, cfg: &MelConfig) -> usize {
    1 + n_samples / cfg.hop_size
}

/// Checks an alignment against audio length, allowing one frame of rounding
/// slack at the end of the file. Returns the segmentation re-anchored to the
/// audio's frame count.
pub fn validate_alignment(
    id: &str,
    raw: &RawAlignment,
    inventory: &PhonemeInventory,
    n_samples: usize,
    cfg: &MelConfig,
) -> Result<PhonemeSegmentation> {
    let audio = frame_count(n_samples, cfg);
    let mismatch = || Error::FrameCountMismatch {
        id: id.to_string(),
        alignment: raw.total_frames,
        audio,
    };
    if raw.total_frames.abs_diff(audio) > 1 {
        return Err(mismatch());
    }
    let seg = raw.resolve(inventory, id)?;
    if seg.start_frames().last().is_some_and(|&s| s >= audio) {
        return Err(mismatch());
    }
    seg.with_total_frames(audio)
}

impl CorpusItem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        waveform: Waveform,
        segmentation: PhonemeSegmentation,
        speaker_id: impl Into<String>,
        gender: Gender,
        word_transcript: Vec<String>,
        mel_config: MelConfig,
    ) -> Result<Self> {
        let id = id.into();
        let speaker_id = speaker_id.into();
        if speaker_id.is_empty() {
            return Err(Error::InvalidConfig(format!("item {id}: empty speaker id")));
        }
        if waveform.sample_rate != mel_config.sample_rate {
            return Err(Error::RateMismatch {
                expected: mel_config.sample_rate,
                actual: waveform.sample_rate,
            });
        }
        let frames = frame_count(waveform.len(), &mel_config);
        if segmentation.total_frames() != frames {
            return Err(Error::FrameCountMismatch {
                id,
                alignment: segmentation.total_frames(),
                audio: frames,
            });
        }
        Ok(Self {
            id,
            waveform_path: None,
            waveform,
            segmentation,
            speaker_id,
            gender,
            word_transcript,
            held_out: false,
            mel_config,
            mel: OnceLock::new(),
        })
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel_config
    }

    pub fn n_frames(&self) -> usize {
        self.segmentation.total_frames()
    }

    pub fn mel(&self) -> &MelSpectrogram {
        self.mel.get_or_init(|| {
            mel_spectrogram(&self.waveform, &self.mel_config)
                .expect("rate and length validated at construction")
        })
    }

    /// Mel frames of phoneme `k`.
    pub fn segment_mel(&self, k: usize) -> Result<MelSpectrogram> {
        let (s, e) = self.segmentation.segment(k)?;
        Ok(self.mel().slice_frames(s, e))
    }
}

/// A phoneme inventory, analysis config and the items that share them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub inventory: PhonemeInventory,
    pub mel_config: MelConfig,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn item(&self, id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn index(&self) -> HashMap<&str, &CorpusItem> {
        self.items.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    pub fn select(&self, ids: &[String]) -> Vec<&CorpusItem> {
        let index = self.index();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }

    /// Phoneme classes (excluding silence) present in `items`.
    pub fn phoneme_classes<'a>(&self, items: impl IntoIterator<Item = &'a CorpusItem>) -> Vec<usize> {
        let sil = self.inventory.silence_index();
        let mut seen = vec![false; self.inventory.len()];
        for item in items {
            for &p in item.segmentation.phonemes() {
                seen[p] = true;
            }
        }
        (0..seen.len()).filter(|&p| seen[p] && p != sil).collect()
    }
}

fn read_speakers(root: &Path) -> Result<HashMap<String, Gender>> {
    let path = root.join("speakers.csv");
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("speaker_id")) {
            continue;
        }
        let (spk, gender) = line.split_once(',').unwrap_or((line, ""));
        out.insert(spk.trim().to_string(), Gender::parse(gender));
    }
    Ok(out)
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

fn alignment_for(wav: &Path, cfg: &MelConfig) -> Result<RawAlignment> {
    let stem = wav.with_extension("");
    let csv = PathBuf::from(format!("{}.align.csv", stem.display()));
    if csv.exists() {
        return parse_alignment_csv(&fs::read_to_string(&csv)?, &csv.display().to_string());
    }
    for ext in ["TextGrid", "textgrid"] {
        let grid = stem.with_extension(ext);
        if grid.exists() {
            return parse_textgrid(&fs::read_to_string(&grid)?, cfg, &grid.display().to_string());
        }
    }
    Err(Error::MissingAlignment(wav.to_path_buf()))
}

/// Loads every `<root>/<speaker>/<utt>.wav` with its sibling alignment
/// (`<utt>.align.csv` or `<utt>.TextGrid`). Items under a directory named
/// `test` are flagged as held out.
pub fn ingest_corpus(root: impl AsRef<Path>, inventory: &PhonemeInventory, cfg: &MelConfig) -> Result<Corpus> {
    let root = root.as_ref();
    cfg.validate()?;
    let speakers = read_speakers(root)?;
    let mut wavs = Vec::new();
    collect_wavs(root, &mut wavs)?;
    let mut items = Vec::with_capacity(wavs.len());
    for wav_path in wavs {
        let rel = wav_path.strip_prefix(root).unwrap_or(&wav_path);
        let speaker_id = rel
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".to_string());
        let utt = wav_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let id = format!("{speaker_id}/{utt}");
        let held_out = rel
            .components()
            .any(|c| c.as_os_str().eq_ignore_ascii_case("test"));
        let raw = alignment_for(&wav_path, cfg)?;
        let waveform = resample(&load_wav(&wav_path)?, cfg.sample_rate);
        let segmentation = validate_alignment(&id, &raw, inventory, waveform.len(), cfg)?;
        let words_path = wav_path.with_extension("txt");
        let word_transcript = if words_path.exists() {
            fs::read_to_string(&words_path)?
                .split_whitespace()
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        let gender = speakers.get(&speaker_id).copied().unwrap_or(Gender::Unknown);
        let mut item = CorpusItem::new(id, waveform, segmentation, speaker_id, gender, word_transcript, *cfg)?;
        item.waveform_path = Some(wav_path);
        item.held_out = held_out;
        items.push(item);
    }
    Ok(Corpus {
        inventory: inventory.clone(),
        mel_config: *cfg,
        items,
    })
}

/// Writes the corpus layout `ingest_corpus` reads, plus `inventory.json`.
pub fn write_corpus(corpus: &Corpus, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut genders = BTreeMap::new();
    for item in &corpus.items {
        let base = root.join(&item.id);
        if let Some(parent) = base.parent() {
            fs::create_dir_all(parent)?;
        }
        write_wav(base.with_extension("wav"), &item.waveform)?;
        fs::write(
            format!("{}.align.csv", base.display()),
            format_alignment_csv(&item.segmentation, &corpus.inventory),
        )?;
        if !item.word_transcript.is_empty() {
            fs::write(base.with_extension("txt"), item.word_transcript.join(" ") + "\n")?;
        }
        genders.insert(item.speaker_id.clone(), item.gender);
    }
    let mut speakers = String::from("speaker_id,gender\n");
    for (spk, g) in genders {
        speakers.push_str(&format!("{spk},{}\n", g.code()));
    }
    fs::write(root.join("speakers.csv"), speakers)?;
    fs::write(
        root.join("inventory.json"),
        serde_json::to_string_pretty(&corpus.inventory)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub const VALIDATION_FRACTION: f64 = 0.2;

/// Held-out items form the test split; the rest is shuffled by `seed` and
/// divided 80/20 into train and validation, keeping speakers disjoint when
/// there are at least two of them.
pub fn split_corpus(items: &[CorpusItem], seed: u64) -> Result<CorpusSplit> {
    let (test, pool): (Vec<&CorpusItem>, Vec<&CorpusItem>) = items.iter().partition(|i| i.held_out);
    if pool.len() < 5 {
        return Err(Error::TooFewItems {
            needed: 5,
            got: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = (pool.len() as f64 * VALIDATION_FRACTION).round() as usize;

    let mut by_speaker: BTreeMap<&str, Vec<&CorpusItem>> = BTreeMap::new();
    for item in &pool {
        by_speaker.entry(item.speaker_id.as_str()).or_default().push(item);
    }
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.shuffle(&mut rng);

    let mut validation = Vec::new();
    let mut train = Vec::new();
    if speakers.len() >= 2 {
        let mut val_speakers = Vec::new();
        let mut count = 0;
        for &spk in &speakers {
            let n = by_speaker[spk].len();
            if count + n <= target {
                val_speakers.push(spk);
                count += n;
            }
        }
        if val_speakers.is_empty() {
            let smallest = speakers
                .iter()
                .copied()
                .min_by_key(|s| by_speaker[s].len())
                .expect("at least two speakers");
            val_speakers.push(smallest);
        }
        for &spk in &speakers {
            let dest = if val_speakers.contains(&spk) {
                &mut validation
            } else {
                &mut train
            };
            dest.extend(by_speaker[spk].iter().map(|i| i.id.clone()));
        }
    } else {
        let mut ids: Vec<String> = pool.iter().map(|i| i.id.clone()).collect();
        ids.shuffle(&mut rng);
        validation = ids.split_off(ids.len() - target);
        train = ids;
    }
    Ok(CorpusSplit {
        train,
        validation,
        test: test.iter().map(|i| i.id.clone()).collect(),
    })
}

/// A phoneme occurrence: item id and segment index.
pub type Instance = (String, usize);

pub fn phoneme_occurrences<'a>(items: impl IntoIterator<Item = &'a CorpusItem>, phoneme: usize) -> Vec<Instance> {
    items
        .into_iter()
        .flat_map(|item| {
            item.segmentation
                .occurrences(phoneme)
                .map(move |k| (item.id.clone(), k))
        })
        .collect()
}

/// Draws `n` occurrences of `phoneme` uniformly: without replacement when
/// enough exist, otherwise with replacement.
pub fn sample_phoneme_instances<'a>(
    items: impl IntoIterator<Item = &'a CorpusItem>,
    inventory: &PhonemeInventory,
    phoneme: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    let mut all = phoneme_occurrences(items, phoneme);
    if all.is_empty() {
        let name = inventory
            .symbols()
            .get(phoneme)
            .cloned()
            .unwrap_or_else(|| phoneme.to_string());
        return Err(Error::PhonemeAbsent(name));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if all.len() >= n {
        let (picked, _) = all.partial_shuffle(&mut rng, n);
        Ok(picked.to_vec())
    } else {
        Ok((0..n).map(|_| all[rng.gen_range(0..all.len())].clone()).collect())
    }
}

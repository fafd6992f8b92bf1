//! Utterances, phoneme segmentations, context windows and masks, with the
//! pure operations that relate them.
//!
//! Frame indices are zero-based throughout. Phoneme `k` of a segmentation
//! occupies frames `[start_frames[k], start_frames[k + 1])`, the last one
//! running to `total_frames`. Frames before the first start belong to no
//! phoneme and are labeled with the inventory's silence symbol.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};

/// Ordered phoneme symbols with a distinguished silence symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "InventoryRepr", into = "InventoryRepr")]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    silence: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct InventoryRepr {
    symbols: Vec<String>,
    silence_symbol: String,
}

impl TryFrom<InventoryRepr> for PhonemeInventory {
    type Error = Error;

    fn try_from(r: InventoryRepr) -> Result<Self> {
        PhonemeInventory::new(r.symbols, &r.silence_symbol)
    }
}

impl From<PhonemeInventory> for InventoryRepr {
    fn from(inv: PhonemeInventory) -> Self {
        InventoryRepr {
            silence_symbol: inv.symbols[inv.silence].clone(),
            symbols: inv.symbols,
        }
    }
}

impl PhonemeInventory {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>, silence: &str) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidInventory("empty symbol".into()));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::InvalidInventory(format!("duplicate symbol {s:?}")));
            }
        }
        let silence = *index
            .get(silence)
            .ok_or_else(|| Error::InvalidInventory(format!("silence symbol {silence:?} missing")))?;
        Ok(Self {
            symbols,
            silence,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn silence_index(&self) -> usize {
        self.silence
    }

    pub fn silence_symbol(&self) -> &str {
        &self.symbols[self.silence]
    }

    pub fn require(&self, symbol: &str) -> Result<usize> {
        self.index_of(symbol)
            .ok_or_else(|| Error::InvalidPhoneme(format!("{symbol:?} not in inventory")))
    }
}

/// Phoneme sequence with frame-indexed start times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSegmentation {
    phonemes: Vec<usize>,
    start_frames: Vec<usize>,
    total_frames: usize,
}

impl PhonemeSegmentation {
    pub fn new(phonemes: Vec<usize>, start_frames: Vec<usize>, total_frames: usize) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::InvalidSegmentation("no phonemes".into()));
        }
        if phonemes.len() != start_frames.len() {
            return Err(Error::InvalidSegmentation(format!(
                "{} phonemes but {} start frames",
                phonemes.len(),
                start_frames.len()
            )));
        }
        if let Some(w) = start_frames.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSegmentation(format!(
                "start frames not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let last = *start_frames.last().expect("non-empty");
        if last >= total_frames {
            return Err(Error::InvalidSegmentation(format!(
                "last start frame {last} not below total {total_frames}"
            )));
        }
        Ok(Self {
            phonemes,
            start_frames,
            total_frames,
        })
    }

    /// Builds a segmentation from symbols, validating against the inventory.
    pub fn from_symbols(
        inventory: &PhonemeInventory,
        symbols: &[&str],
        start_frames: Vec<usize>,
        total_frames: usize,
    ) -> Result<Self> {
        let phonemes = symbols
            .iter()
            .map(|s| inventory.require(s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(phonemes, start_frames, total_frames)
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn phonemes(&self) -> &[usize] {
        &self.phonemes
    }

    pub fn phoneme(&self, k: usize) -> usize {
        self.phonemes[k]
    }

    pub fn start_frames(&self) -> &[usize] {
        &self.start_frames
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    /// `[start, end)` frames of phoneme `k`.
    pub fn segment(&self, k: usize) -> Result<(usize, usize)> {
        if k >= self.len() {
            return Err(Error::SegmentOutOfRange {
                k,
                count: self.len(),
            });
        }
        let end = self
            .start_frames
            .get(k + 1)
            .copied()
            .unwrap_or(self.total_frames);
        Ok((self.start_frames[k], end))
    }

    pub fn duration(&self, k: usize) -> Result<usize> {
        self.segment(k).map(|(s, e)| e - s)
    }

    /// Index of the phoneme whose segment contains frame `t`.
    pub fn phoneme_at(&self, t: usize) -> Option<usize> {
        if t >= self.total_frames || t < self.start_frames[0] {
            return None;
        }
        Some(self.start_frames.partition_point(|&s| s <= t) - 1)
    }

    /// Same phonemes with a different total frame count.
    pub fn with_total_frames(&self, total_frames: usize) -> Result<Self> {
        Self::new(self.phonemes.clone(), self.start_frames.clone(), total_frames)
    }

    pub fn occurrences(&self, phoneme: usize) -> impl Iterator<Item = usize> + '_ {
        self.phonemes
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == phoneme)
            .map(|(k, _)| k)
    }
}

/// A `length`-frame span of an utterance whose window-local frames
/// `[mask_lo, mask_hi)` hold the masked phoneme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub utterance_start: usize,
    pub length: usize,
    pub mask_lo: usize,
    pub mask_hi: usize,
}

impl WindowSpec {
    pub fn new(utterance_start: usize, length: usize, mask_lo: usize, mask_hi: usize) -> Result<Self> {
        if mask_lo > mask_hi || mask_hi > length {
            return Err(Error::InvalidSegmentation(format!(
                "mask [{mask_lo}, {mask_hi}) invalid for window length {length}"
            )));
        }
        Ok(Self {
            utterance_start,
            length,
            mask_lo,
            mask_hi,
        })
    }

    pub fn utterance_end(&self) -> usize {
        self.utterance_start + self.length
    }

    pub fn masked_frames(&self) -> usize {
        self.mask_hi - self.mask_lo
    }

    /// Masked region in utterance coordinates.
    pub fn masked_utterance_range(&self) -> (usize, usize) {
        (
            self.utterance_start + self.mask_lo,
            self.utterance_start + self.mask_hi,
        )
    }
}

/// Context length for a corpus whose longest target phoneme lasts
/// `max_duration` frames: 30% longer, rounded up.
pub fn context_frames_for(max_duration: usize) -> usize {
    (13 * max_duration).div_ceil(10)
}

/// Centers a `tau`-frame window on phoneme `k`. When the phoneme cannot be
/// centered the odd frame of context goes to the right; at utterance edges
/// the window is shifted, never shrunk.
pub fn compute_context_window(
    segmentation: &PhonemeSegmentation,
    k: usize,
    tau: usize,
) -> Result<WindowSpec> {
    let (start, end) = segmentation.segment(k)?;
    let total = segmentation.total_frames();
    if tau > total {
        return Err(Error::WindowTooLong {
            tau,
            total_frames: total,
        });
    }
    let duration = end - start;
    if tau < duration {
        return Err(Error::WindowTooShort { tau, duration });
    }
    let left = (tau - duration) / 2;
    let window_start = start.saturating_sub(left).min(total - tau);
    WindowSpec::new(window_start, tau, start - window_start, end - window_start)
}

/// Binary frame mask: zero on the masked run, one elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    values: Vec<u8>,
}

impl MaskVector {
    /// Validates that `values` is binary with at most one contiguous zero run.
    pub fn from_values(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidSegmentation("mask values must be 0 or 1".into()));
        }
        let runs = values
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v == 0 && (i == 0 || values[i - 1] == 1))
            .count();
        if runs > 1 {
            return Err(Error::InvalidSegmentation("mask has more than one zero run".into()));
        }
        Ok(Self { values })
    }

    pub fn all_ones(len: usize) -> Self {
        Self { values: vec![1; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn sum(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// `1 - m` as frame weights.
    pub fn complement_weights(&self) -> Vec<f64> {
        self.values.iter().map(|&v| (1 - v) as f64).collect()
    }

    /// Number of zero-valued frames.
    pub fn masked_count(&self) -> usize {
        self.len() - self.sum()
    }
}

pub fn build_mask(window: &WindowSpec) -> MaskVector {
    let values = (0..window.length)
        .map(|i| u8::from(!(window.mask_lo..window.mask_hi).contains(&i)))
        .collect();
    MaskVector { values }
}

/// Scales frame `i` by `weights[i]`.
pub fn apply_frame_weights(mel: &MelSpectrogram, weights: &[f64]) -> Result<MelSpectrogram> {
    if weights.len() != mel.n_frames {
        return Err(Error::shape(
            format!("{} frame weights", mel.n_frames),
            weights.len(),
        ));
    }
    let mut out = mel.clone();
    for (t, &w) in weights.iter().enumerate() {
        out.frame_mut(t).iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

/// Element-wise `m ⊙ x` with the mask broadcast over mel bins.
pub fn apply_mask(mel: &MelSpectrogram, mask: &MaskVector) -> Result<MelSpectrogram> {
    apply_frame_weights(mel, &mask.weights())
}

/// Per-frame phoneme labels for a window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePhonemeSequence {
    pub labels: Vec<usize>,
}

impl FramePhonemeSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labels every window frame with its phoneme's inventory index, except the
/// frames of phoneme `override_k`, which get `override_symbol`.
pub fn frame_phoneme_labels(
    segmentation: &PhonemeSegmentation,
    inventory: &PhonemeInventory,
    window: &WindowSpec,
    override_k: usize,
    override_symbol: usize,
) -> Result<FramePhonemeSequence> {
    if override_k >= segmentation.len() {
        return Err(Error::SegmentOutOfRange {
            k: override_k,
            count: segmentation.len(),
        });
    }
    if override_symbol >= inventory.len() {
        return Err(Error::InvalidPhoneme(format!(
            "index {override_symbol} outside inventory of {}",
            inventory.len()
        )));
    }
    if window.utterance_end() > segmentation.total_frames() {
        return Err(Error::WindowTooLong {
            tau: window.length,
            total_frames: segmentation.total_frames(),
        });
    }
    let labels = (window.utterance_start..window.utterance_end())
        .map(|t| match segmentation.phoneme_at(t) {
            Some(k) if k == override_k => override_symbol,
            Some(k) => segmentation.phoneme(k),
            None => inventory.silence_index(),
        })
        .collect();
    Ok(FramePhonemeSequence { labels })
}

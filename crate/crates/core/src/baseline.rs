//! Donor-splicing baseline: cut the recipient's phoneme out and paste another
//! speaker's production of the target phoneme in its place.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusItem, Gender};
use crate::dsp::{crossfade_splice, Waveform};
use crate::error::{Error, Result};
use crate::problem::{PhonemeInventory, PhonemeSegmentation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorQuery {
    pub target_phoneme: usize,
    pub gender: Gender,
    pub preferred_word: Option<String>,
}

/// Picks a donor occurrence `(item id, segment index)`: the target phoneme
/// spoken by another speaker of the same gender, restricted to utterances
/// containing the preferred word when any do.
pub fn select_donor(
    items: &[&CorpusItem],
    inventory: &PhonemeInventory,
    query: &DonorQuery,
    exclude_speaker: &str,
    seed: u64,
) -> Result<(String, usize)> {
    if query.target_phoneme >= inventory.len() {
        return Err(Error::InvalidPhoneme(format!(
            "index {} outside inventory of {}",
            query.target_phoneme,
            inventory.len()
        )));
    }
    let candidates: Vec<(&CorpusItem, usize)> = items
        .iter()
        .filter(|it| it.gender == query.gender && it.speaker_id != exclude_speaker)
        .flat_map(|it| it.segmentation.occurrences(query.target_phoneme).map(move |k| (*it, k)))
        .collect();
    let preferred: Vec<(&CorpusItem, usize)> = match &query.preferred_word {
        Some(word) => candidates
            .iter()
            .copied()
            .filter(|(it, _)| it.word_transcript.iter().any(|w| w.eq_ignore_ascii_case(word)))
            .collect(),
        None => Vec::new(),
    };
    let pool = if preferred.is_empty() { &candidates } else { &preferred };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose(&mut rng)
        .map(|(it, k)| (it.id.clone(), *k))
        .ok_or_else(|| Error::NoDonor(inventory.symbol(query.target_phoneme).to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcatConfig {
    /// Crossfade length in samples.
    pub fade_len: usize,
    /// Join offsets searched on each side of the aligned boundary, in samples.
    pub search_radius: usize,
}

impl ConcatConfig {
    /// 10 ms fades and a 5 ms search radius.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            fade_len: sample_rate as usize / 100,
            search_radius: sample_rate as usize / 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatResult {
    pub waveform: Waveform,
    /// Shift applied to both recipient cut points.
    pub offset: isize,
    /// Summed squared difference over the two fade windows at `offset`.
    pub cost: f64,
}

/// Squared L2 distance between the recipient and donor over both fade
/// windows when the recipient's cut `[s, e)` is shifted by `delta`. `None`
/// when a window would leave the recipient.
pub fn join_cost(recipient: &[f32], s: usize, e: usize, donor: &[f32], fade_len: usize, delta: isize) -> Option<f64> {
    let n = recipient.len() as isize;
    let (s, e, l) = (s as isize + delta, e as isize + delta, fade_len as isize);
    if s < 0 || e - l < 0 || e > n || s + l > n || donor.len() < fade_len {
        return None;
    }
    let (s, e) = (s as usize, e as usize);
    let d = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum()
    };
    let head = d(&recipient[s..s + fade_len], &donor[..fade_len]);
    let tail = d(&recipient[e - fade_len..e], &donor[donor.len() - fade_len..]);
    Some(head + tail)
}

/// Best offset in `[-radius, radius]`; ties go to the smallest `|delta|`,
/// then to the negative side.
pub fn best_join_offset(
    recipient: &[f32],
    s: usize,
    e: usize,
    donor: &[f32],
    fade_len: usize,
    radius: usize,
) -> Option<(isize, f64)> {
    let r = radius as isize;
    let mut order: Vec<isize> = (-r..=r).collect();
    order.sort_by_key(|d| (d.abs(), *d));
    let mut best: Option<(isize, f64)> = None;
    for delta in order {
        if let Some(c) = join_cost(recipient, s, e, donor, fade_len, delta) {
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((delta, c));
            }
        }
    }
    best
}

/// Replaces phoneme `k` of the recipient with `donor`. Both cut points move
/// by one shared offset, chosen by waveform similarity over the fade
/// windows, so the output is exactly `len - (e - s) + donor.len()` samples.
pub fn smooth_concat(
    recipient: &Waveform,
    segmentation: &PhonemeSegmentation,
    k: usize,
    donor: &Waveform,
    hop_size: usize,
    cfg: &ConcatConfig,
) -> Result<ConcatResult> {
    if recipient.sample_rate != donor.sample_rate {
        return Err(Error::RateMismatch {
            expected: recipient.sample_rate,
            actual: donor.sample_rate,
        });
    }
    let (fs, fe) = segmentation.segment(k)?;
    let n = recipient.len();
    let (s, e) = ((fs * hop_size).min(n), (fe * hop_size).min(n));
    let l = cfg.fade_len;
    if donor.len() < l || e - s < l {
        return Err(Error::FadeOutOfRange(format!(
            "fade of {l} samples longer than the donor ({}) or the recipient segment ({})",
            donor.len(),
            e - s
        )));
    }
    let (delta, cost) = best_join_offset(&recipient.samples, s, e, &donor.samples, l, cfg.search_radius)
        .ok_or_else(|| Error::FadeOutOfRange(format!("no join offset within {} samples fits", cfg.search_radius)))?;
    let (s, e) = ((s as isize + delta) as usize, (e as isize + delta) as usize);
    let head = crossfade_splice(recipient, donor, s, 0, l)?;
    let out = crossfade_splice(&head, recipient, s + donor.len() - l, e - l, l)?;
    Ok(ConcatResult {
        waveform: out,
        offset: delta,
        cost,
    })
}

/// Samples of segment `k` in an utterance analysed with `hop_size`.
pub fn segment_samples(w: &Waveform, segmentation: &PhonemeSegmentation, k: usize, hop_size: usize) -> Result<Waveform> {
    let (a, b) = segmentation.segment(k)?;
    Ok(w.slice((a * hop_size).min(w.len()), (b * hop_size).min(w.len())))
}

//! Alignment files: a small CSV format and the interval tier of a TextGrid.

use std::fmt::Write as _;

use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::problem::{PhonemeInventory, PhonemeSegmentation};

/// Symbols and start frames as read from disk, before inventory checks.
/// An empty symbol stands for silence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAlignment {
    pub symbols: Vec<String>,
    pub start_frames: Vec<usize>,
    pub total_frames: usize,
}

impl RawAlignment {
    /// Resolves symbols against the inventory; `id` is used in error messages.
    pub fn resolve(&self, inventory: &PhonemeInventory, id: &str) -> Result<PhonemeSegmentation> {
        let phonemes = self
            .symbols
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Ok(inventory.silence_index())
                } else {
                    inventory.index_of(s).ok_or_else(|| Error::UnknownPhoneme {
                        id: id.to_string(),
                        symbol: s.clone(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        PhonemeSegmentation::new(phonemes, self.start_frames.clone(), self.total_frames)
    }
}

fn parse_err(path: &str, detail: impl Into<String>) -> Error {
    Error::AlignmentParse {
        path: path.to_string(),
        detail: detail.into(),
    }
}

/// Parses
///
/// ```text
/// total_frames=200
/// phoneme,start_frame
/// sil,0
/// AH,12
/// ```
///
/// The column header line is optional.
pub fn parse_alignment_csv(text: &str, path: &str) -> Result<RawAlignment> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let total_frames = header
        .strip_prefix("total_frames=")
        .ok_or_else(|| parse_err(path, "first line must be total_frames=<T>"))?
        .trim()
        .parse::<usize>()
        .map_err(|e| parse_err(path, format!("total_frames: {e}")))?;
    let mut symbols = Vec::new();
    let mut start_frames = Vec::new();
    for (i, line) in lines.enumerate() {
        if i == 0 && line.eq_ignore_ascii_case("phoneme,start_frame") {
            continue;
        }
        let (sym, start) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, format!("malformed row {line:?}")))?;
        let start = start
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(path, format!("row {line:?}: {e}")))?;
        symbols.push(sym.trim().to_string());
        start_frames.push(start);
    }
    if symbols.is_empty() {
        return Err(parse_err(path, "no phoneme rows"));
    }
    Ok(RawAlignment {
        symbols,
        start_frames,
        total_frames,
    })
}

pub fn format_alignment_csv(seg: &PhonemeSegmentation, inventory: &PhonemeInventory) -> String {
    let mut out = format!("total_frames={}\nphoneme,start_frame\n", seg.total_frames());
    for (&p, &s) in seg.phonemes().iter().zip(seg.start_frames()) {
        let _ = writeln!(out, "{},{}", inventory.symbol(p), s);
    }
    out
}

fn quoted_value(line: &str) -> Option<String> {
    let (_, rest) = line.split_once('=')?;
    let rest = rest.trim();
    let inner = rest.strip_prefix('"')?.strip_suffix('"')?;
    Some(inner.replace("\"\"", "\""))
}

fn number_value(line: &str) -> Option<f64> {
    line.split_once('=')?.1.trim().parse().ok()
}

/// Reads the interval tier named `phones` from a long-format TextGrid.
/// Times are converted to frames with the hop size; intervals that round to
/// the same start frame as their predecessor are dropped.
pub fn parse_textgrid(text: &str, cfg: &MelConfig, path: &str) -> Result<RawAlignment> {
    let mut in_phones = false;
    let mut found = false;
    let mut tier_xmax = None;
    let mut intervals: Vec<(f64, String)> = Vec::new();
    let mut pending_xmin: Option<f64> = None;
    let mut in_interval = false;
    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with("item [") {
            if found && in_phones {
                break;
            }
            in_phones = false;
            in_interval = false;
            continue;
        }
        if line.starts_with("name =") {
            in_phones = quoted_value(line).as_deref() == Some("phones");
            found |= in_phones;
            continue;
        }
        if !in_phones {
            continue;
        }
        if line.starts_with("intervals [") {
            in_interval = true;
            pending_xmin = None;
        } else if line.starts_with("xmin =") {
            if in_interval {
                pending_xmin = number_value(line);
            }
        } else if line.starts_with("xmax =") {
            if !in_interval {
                tier_xmax = number_value(line);
            }
        } else if line.starts_with("text =") && in_interval {
            let xmin = pending_xmin.ok_or_else(|| parse_err(path, "interval without xmin"))?;
            let label = quoted_value(line).ok_or_else(|| parse_err(path, "unquoted interval text"))?;
            intervals.push((xmin, label.trim().to_string()));
            in_interval = false;
        }
    }
    if !found {
        return Err(parse_err(path, "no interval tier named \"phones\""));
    }
    let xmax = tier_xmax.ok_or_else(|| parse_err(path, "phones tier without xmax"))?;
    let total_frames = 1 + (xmax * cfg.sample_rate as f64 / cfg.hop_size as f64).floor() as usize;
    let mut symbols = Vec::new();
    let mut start_frames: Vec<usize> = Vec::new();
    for (xmin, label) in intervals {
        let frame = cfg.seconds_to_frame(xmin);
        if start_frames.last().is_some_and(|&prev| frame <= prev) {
            // zero-length after rounding: the later interval wins
            symbols.pop();
            start_frames.pop();
        }
        symbols.push(label);
        start_frames.push(frame);
    }
    if symbols.is_empty() {
        return Err(parse_err(path, "phones tier has no intervals"));
    }
    Ok(RawAlignment {
        symbols,
        start_frames,
        total_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let inv = PhonemeInventory::new(["sil", "AH", "R"], "sil").unwrap();
        let text = "total_frames=40\nphoneme,start_frame\nsil,0\nR,5\nAH,19\n";
        let raw = parse_alignment_csv(text, "x").unwrap();
        assert_eq!(raw.total_frames, 40);
        assert_eq!(raw.start_frames, vec![0, 5, 19]);
        let seg = raw.resolve(&inv, "x").unwrap();
        assert_eq!(format_alignment_csv(&seg, &inv), text);
        // header row is optional
        let raw2 = parse_alignment_csv("total_frames=40\nsil,0\nR,5\nAH,19", "x").unwrap();
        assert_eq!(raw, raw2);
    }

    #[test]
    fn csv_errors() {
        assert!(parse_alignment_csv("", "x").is_err());
        assert!(parse_alignment_csv("sil,0", "x").is_err());
        assert!(parse_alignment_csv("total_frames=9\nsil;0", "x").is_err());
        let inv = PhonemeInventory::new(["sil"], "sil").unwrap();
        let raw = parse_alignment_csv("total_frames=9\nZZ,0", "x").unwrap();
        assert!(matches!(raw.resolve(&inv, "u1"), Err(Error::UnknownPhoneme { .. })));
    }

    const GRID: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 1.0
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 1.0
        intervals: size = 1
        intervals [1]:
            xmin = 0
            xmax = 1.0
            text = "right"
    item [2]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 1.0
        intervals: size = 4
        intervals [1]:
            xmin = 0
            xmax = 0.1
            text = ""
        intervals [2]:
            xmin = 0.1
            xmax = 0.4
            text = "R"
        intervals [3]:
            xmin = 0.4
            xmax = 0.7
            text = "AY"
        intervals [4]:
            xmin = 0.7
            xmax = 1.0
            text = "T"
"#;

    #[test]
    fn textgrid_phones_tier() {
        let cfg = MelConfig::default();
        let raw = parse_textgrid(GRID, &cfg, "g").unwrap();
        assert_eq!(raw.symbols, vec!["", "R", "AY", "T"]);
        // 0.1 s * 22050 / 256 = 8.61 -> 9
        assert_eq!(raw.start_frames, vec![0, 9, 34, 60]);
        assert_eq!(raw.total_frames, 87);
        let inv = PhonemeInventory::new(["sil", "R", "AY", "T"], "sil").unwrap();
        let seg = raw.resolve(&inv, "g").unwrap();
        assert_eq!(seg.phoneme(0), 0);
    }

    #[test]
    fn textgrid_without_phones() {
        let grid = GRID.replace("\"phones\"", "\"segments\"");
        assert!(parse_textgrid(&grid, &MelConfig::default(), "g").is_err());
    }
}

use std::path::Path;

use inpaint_core::problem::{PhonemeInventory, PhonemeSegmentation};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// A word the learner is asked to say, with the phoneme to correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub word: String,
    /// Canonical pronunciation as inventory symbols.
    pub phonemes: Vec<String>,
    /// 0-based index of the phoneme to correct.
    pub k: usize,
    /// Symbol the corrected phoneme should become.
    pub rho_star: String,
    /// Expected share of the recording taken by each phoneme. Empty means
    /// equal shares.
    #[serde(default)]
    pub durations: Vec<f64>,
}

impl Prompt {
    pub fn validate(&self, inventory: &PhonemeInventory) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(format!("prompt {:?}: {m}", self.id)));
        if self.phonemes.is_empty() {
            return bad("no phonemes".into());
        }
        if let Some(s) = self.phonemes.iter().find(|s| inventory.index_of(s).is_none()) {
            return bad(format!("unknown phoneme {s:?}"));
        }
        if inventory.index_of(&self.rho_star).is_none() {
            return bad(format!("unknown target phoneme {:?}", self.rho_star));
        }
        if self.k >= self.phonemes.len() {
            return bad(format!("k = {} outside {} phonemes", self.k, self.phonemes.len()));
        }
        if !self.durations.is_empty()
            && (self.durations.len() != self.phonemes.len() || self.durations.iter().any(|&d| !(d > 0.0 && d.is_finite())))
        {
            return bad("durations must be one positive share per phoneme".into());
        }
        Ok(())
    }

    /// Spreads the prompt's phonemes over `total_frames` in proportion to
    /// their expected durations.
    pub fn proportional_alignment(
        &self,
        inventory: &PhonemeInventory,
        total_frames: usize,
    ) -> inpaint_core::Result<PhonemeSegmentation> {
        let n = self.phonemes.len();
        let shares = if self.durations.is_empty() {
            vec![1.0; n]
        } else {
            self.durations.clone()
        };
        let sum: f64 = shares.iter().sum();
        let mut starts = Vec::with_capacity(n);
        let mut acc = 0.0;
        for (i, share) in shares.iter().enumerate() {
            // every phoneme keeps at least one frame
            let s = ((acc / sum * total_frames as f64).round() as usize).max(i);
            starts.push(s.min(total_frames.saturating_sub(n - i)));
            acc += share;
        }
        let symbols: Vec<&str> = self.phonemes.iter().map(String::as_str).collect();
        PhonemeSegmentation::from_symbols(inventory, &symbols, starts, total_frames)
    }
}

/// Reads a JSON list of prompts. An empty file is an empty list; anything
/// malformed is a configuration error.
pub fn load_prompts(path: &Path, inventory: &PhonemeInventory) -> Result<Vec<Prompt>, ServiceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::Config(format!("cannot read prompts {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let prompts: Vec<Prompt> = serde_json::from_str(&text)
        .map_err(|e| ServiceError::Config(format!("malformed prompts {}: {e}", path.display())))?;
    let mut ids = std::collections::HashSet::new();
    for p in &prompts {
        p.validate(inventory)?;
        if !ids.insert(p.id.as_str()) {
            return Err(ServiceError::Config(format!("duplicate prompt id {:?}", p.id)));
        }
    }
    Ok(prompts)
}

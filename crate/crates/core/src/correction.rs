//! Inference: window the mispronounced phoneme, regenerate it under the
//! desired label, splice the result back and vocode the whole utterance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusItem;
use crate::dsp::{griffin_lim, load_wav, write_wav, MelAnalyzer, MelConfig, MelSpectrogram, Waveform, DEFAULT_GRIFFIN_LIM_ITERS};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::problem::{
    apply_mask, build_mask, compute_context_window, frame_phoneme_labels, MaskVector, PhonemeInventory,
    PhonemeSegmentation, WindowSpec,
};

/// Seam width used when a request does not set one.
pub const DEFAULT_BLEND: usize = 3;

/// One correction: replace phoneme `k` (0-based) of `segmentation` by
/// inventory entry `rho_star`.
#[derive(Debug, Clone)]
pub struct CorrectionRequest {
    pub waveform: Waveform,
    pub segmentation: PhonemeSegmentation,
    pub k: usize,
    pub rho_star: usize,
    pub blend: usize,
}

impl CorrectionRequest {
    pub fn new(waveform: Waveform, segmentation: PhonemeSegmentation, k: usize, rho_star: usize) -> Self {
        Self {
            waveform,
            segmentation,
            k,
            rho_star,
            blend: DEFAULT_BLEND,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub waveform: Waveform,
    pub original_mel: MelSpectrogram,
    pub corrected_mel: MelSpectrogram,
    pub window: WindowSpec,
    /// Seam width actually used, after clamping to the room beside the mask.
    pub blend: usize,
}

/// Replaces window frames `[mask_lo, mask_hi)` of `full` with `gen_window`
/// and crossfades `blend` frames on each side. Seam frame `j` (0-based,
/// counted from the outer edge) takes weight `j / blend` from the generator.
pub fn splice_back(
    full: &MelSpectrogram,
    gen_window: &MelSpectrogram,
    window: &WindowSpec,
    blend: usize,
) -> Result<MelSpectrogram> {
    if gen_window.n_frames != window.length || gen_window.n_mels != full.n_mels {
        return Err(Error::shape(
            format!("{}x{}", window.length, full.n_mels),
            format!("{}x{}", gen_window.n_frames, gen_window.n_mels),
        ));
    }
    if window.utterance_end() > full.n_frames {
        return Err(Error::WindowTooLong {
            tau: window.length,
            total_frames: full.n_frames,
        });
    }
    if blend > window.mask_lo || blend > window.length - window.mask_hi {
        return Err(Error::BlendTooWide { blend });
    }
    let mut out = full.clone();
    let s = window.utterance_start;
    for i in window.mask_lo..window.mask_hi {
        out.frame_mut(s + i).copy_from_slice(gen_window.frame(i));
    }
    for j in 1..blend {
        let w = j as f64 / blend as f64;
        for i in [window.mask_lo - blend + j, window.mask_hi + blend - 1 - j] {
            let g = gen_window.frame(i);
            for (o, &g) in out.frame_mut(s + i).iter_mut().zip(g) {
                *o += w * (g - *o);
            }
        }
    }
    Ok(out)
}

/// Mel-domain half of the pipeline. Returns the corrected mel, the window
/// and the blend used.
pub fn correct_mel(
    mel: &MelSpectrogram,
    segmentation: &PhonemeSegmentation,
    k: usize,
    rho_star: usize,
    blend: usize,
    generator: &Generator,
) -> Result<(MelSpectrogram, WindowSpec, usize)> {
    let inventory = &generator.config.inventory;
    if k >= segmentation.len() {
        return Err(Error::InvalidPhoneme(format!(
            "k = {k} outside a sequence of {} phonemes",
            segmentation.len()
        )));
    }
    if rho_star >= inventory.len() {
        return Err(Error::InvalidPhoneme(format!(
            "index {rho_star} outside inventory of {}",
            inventory.len()
        )));
    }
    let segmentation = reanchor(segmentation, mel.n_frames)?;
    let tau = generator.tau();
    let window = compute_context_window(&segmentation, k, tau).map_err(|e| match e {
        Error::WindowTooLong { tau, total_frames } => Error::UtteranceTooShort {
            frames: total_frames,
            tau,
        },
        e => e,
    })?;
    let target = mel.slice_frames(window.utterance_start, window.utterance_end());
    let masked = apply_mask(&target, &build_mask(&window))?;
    let labels = frame_phoneme_labels(&segmentation, inventory, &window, k, rho_star)?;
    let generated = generator.generate(&masked, &labels)?;
    let blend = blend.min(window.mask_lo).min(tau - window.mask_hi);
    Ok((splice_back(mel, &generated, &window, blend)?, window, blend))
}

/// Alignments may be one frame off the audio's frame count; anything more
/// is an error.
fn reanchor(seg: &PhonemeSegmentation, frames: usize) -> Result<PhonemeSegmentation> {
    match seg.total_frames().abs_diff(frames) {
        0 => Ok(seg.clone()),
        1 => seg.with_total_frames(frames),
        _ => Err(Error::FrameCountMismatch {
            id: "request".into(),
            alignment: seg.total_frames(),
            audio: frames,
        }),
    }
}

pub fn correct_utterance(req: &CorrectionRequest, generator: &Generator, vocoder: &Vocoder) -> Result<Correction> {
    let mel_cfg = generator.config.mel;
    if req.waveform.sample_rate != mel_cfg.sample_rate {
        return Err(Error::RateMismatch {
            expected: mel_cfg.sample_rate,
            actual: req.waveform.sample_rate,
        });
    }
    let original_mel = vocoder.analyzer().analyze(&req.waveform)?;
    let (corrected_mel, window, blend) = correct_mel(
        &original_mel,
        &req.segmentation,
        req.k,
        req.rho_star,
        req.blend,
        generator,
    )?;
    let waveform = vocoder.vocode(&corrected_mel)?;
    Ok(Correction {
        waveform,
        original_mel,
        corrected_mel,
        window,
        blend,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VocoderKind {
    GriffinLim {
        iterations: usize,
    },
    /// `command[0]` is the program. `{mel}` and `{wav}` in the arguments are
    /// replaced by the input and output paths; without them both paths are
    /// appended.
    ExternalNeural {
        command: Vec<String>,
    },
}

impl Default for VocoderKind {
    fn default() -> Self {
        VocoderKind::GriffinLim {
            iterations: DEFAULT_GRIFFIN_LIM_ITERS,
        }
    }
}

pub struct Vocoder {
    kind: VocoderKind,
    analyzer: MelAnalyzer,
    // one external process at a time per adapter
    external: Mutex<()>,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Vocoder {
    pub fn new(kind: VocoderKind, mel: MelConfig) -> Result<Self> {
        match &kind {
            VocoderKind::GriffinLim { iterations: 0 } => {
                return Err(Error::InvalidConfig("griffin-lim needs at least one iteration".into()))
            }
            VocoderKind::ExternalNeural { command } if command.is_empty() => {
                return Err(Error::InvalidConfig("external vocoder command is empty".into()))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            analyzer: MelAnalyzer::new(mel)?,
            external: Mutex::new(()),
        })
    }

    pub fn griffin_lim(mel: MelConfig) -> Result<Self> {
        Self::new(VocoderKind::default(), mel)
    }

    pub fn kind(&self) -> &VocoderKind {
        &self.kind
    }

    pub fn analyzer(&self) -> &MelAnalyzer {
        &self.analyzer
    }

    pub fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        let cfg = self.analyzer.config();
        if mel.n_mels != cfg.n_mels {
            return Err(Error::shape(format!("{} mel bins", cfg.n_mels), mel.n_mels));
        }
        match &self.kind {
            VocoderKind::GriffinLim { iterations } => Ok(griffin_lim(mel, &self.analyzer, *iterations)),
            VocoderKind::ExternalNeural { command } => {
                let _guard = self.external.lock().unwrap_or_else(|e| e.into_inner());
                self.run_external(command, mel)
            }
        }
    }

    fn run_external(&self, command: &[String], mel: &MelSpectrogram) -> Result<Waveform> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("inpaint-vocoder-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir)?;
        let result = (|| {
            let mel_path = dir.join("input.mel");
            let wav_path = dir.join("output.wav");
            write_mel_file(&mel_path, mel)?;
            let (mel_s, wav_s) = (mel_path.display().to_string(), wav_path.display().to_string());
            let mut args: Vec<String> = command[1..]
                .iter()
                .map(|a| a.replace("{mel}", &mel_s).replace("{wav}", &wav_s))
                .collect();
            if !command[1..].iter().any(|a| a.contains("{mel}") || a.contains("{wav}")) {
                args.push(mel_s);
                args.push(wav_s);
            }
            let status = Command::new(&command[0])
                .args(&args)
                .status()
                .map_err(|e| Error::ExternalVocoderFailed(format!("{}: {e}", command[0])))?;
            if !status.success() {
                return Err(Error::ExternalVocoderFailed(format!("{} exited with {status}", command[0])));
            }
            if !wav_path.exists() {
                return Err(Error::ExternalVocoderFailed("no output WAV written".into()));
            }
            let wav = load_wav(&wav_path).map_err(|e| Error::ExternalVocoderFailed(e.to_string()))?;
            let rate = self.analyzer.config().sample_rate;
            if wav.sample_rate != rate {
                return Err(Error::ExternalVocoderFailed(format!(
                    "output at {} Hz, expected {rate}",
                    wav.sample_rate
                )));
            }
            Ok(wav)
        })();
        let _ = fs::remove_dir_all(&dir);
        result
    }
}

/// Writes the vocoder exchange format: `T` and `D` as u32 LE, then `T * D`
/// f32 LE values frame by frame.
pub fn write_mel_file(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * mel.data.len());
    bytes.extend_from_slice(&(mel.n_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for &v in &mel.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_mel_file(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::CorruptFile(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(corrupt("missing header"));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * t * d {
        return Err(corrupt("payload size disagrees with header"));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    MelSpectrogram::new(t, d, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePair {
    pub item_id: String,
    pub k: usize,
    pub phoneme: String,
    pub window: WindowSpec,
    /// Paths relative to the export directory.
    pub mel: PathBuf,
    pub wav: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub tau: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub hop_size: usize,
    pub pairs: Vec<FinetunePair>,
}

pub const FINETUNE_MANIFEST: &str = "manifest.json";

/// Identity passes for vocoder fine-tuning: every occurrence of a target
/// phoneme is regenerated with nothing masked and its true labels, and the
/// result is written next to the audio it came from.
pub fn export_vocoder_finetune_set(
    items: &[&CorpusItem],
    inventory: &PhonemeInventory,
    targets: &[usize],
    generator: &Generator,
    out_dir: impl AsRef<Path>,
) -> Result<FinetuneManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let tau = generator.tau();
    let cfg = generator.config.mel;
    let mut pairs = Vec::new();
    for item in items {
        let seg = &item.segmentation;
        for k in 0..seg.len() {
            let p = seg.phoneme(k);
            if !targets.contains(&p) {
                continue;
            }
            let window = match compute_context_window(seg, k, tau) {
                Ok(w) => w,
                Err(Error::WindowTooLong { .. } | Error::WindowTooShort { .. }) => continue,
                Err(e) => return Err(e),
            };
            let target = item.mel().slice_frames(window.utterance_start, window.utterance_end());
            let input = apply_mask(&target, &MaskVector::all_ones(tau))?;
            let labels = frame_phoneme_labels(seg, inventory, &window, k, p)?;
            let generated = generator.generate(&input, &labels)?;
            let stem = format!("{:05}", pairs.len());
            let mel_rel = PathBuf::from(format!("{stem}.mel"));
            let wav_rel = PathBuf::from(format!("{stem}.wav"));
            write_mel_file(out_dir.join(&mel_rel), &generated)?;
            let a = (window.utterance_start * cfg.hop_size).min(item.waveform.len());
            let b = (window.utterance_end() * cfg.hop_size).min(item.waveform.len());
            write_wav(out_dir.join(&wav_rel), &item.waveform.slice(a, b))?;
            pairs.push(FinetunePair {
                item_id: item.id.clone(),
                k,
                phoneme: inventory.symbol(p).to_string(),
                window,
                mel: mel_rel,
                wav: wav_rel,
            });
        }
    }
    let manifest = FinetuneManifest {
        tau,
        n_mels: cfg.n_mels,
        sample_rate: cfg.sample_rate,
        hop_size: cfg.hop_size,
        pairs,
    };
    fs::write(out_dir.join(FINETUNE_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

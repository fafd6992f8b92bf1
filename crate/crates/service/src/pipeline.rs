//! What a worker does with one job: resample, align, correct, vocode, store.

use inpaint_core::correction::{correct_utterance, CorrectionRequest};
use inpaint_core::corpus::{frame_count, parse_alignment_csv, validate_alignment};
use inpaint_core::dsp::{decode_wav, encode_wav, resample, MelConfig, Waveform};
use inpaint_core::problem::PhonemeSegmentation;

use crate::jobs::{JobOutputs, JobState, GENERATED_WAV, VOCODER_ONLY_WAV};
use crate::{Prompt, ServiceError, Shared, MAX_UPLOAD_SECS};

#[derive(Debug, Clone, PartialEq)]
pub enum UploadProblem {
    Undecodable(String),
    TooLong(f64),
    TooShort { frames: usize, tau: usize },
}

impl std::fmt::Display for UploadProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UploadProblem::Undecodable(e) => write!(f, "undecodable audio: {e}"),
            UploadProblem::TooLong(secs) => write!(f, "recording of {secs:.1} s exceeds {MAX_UPLOAD_SECS} s"),
            &UploadProblem::TooShort { frames, tau } => {
                write!(f, "{}", inpaint_core::Error::UtteranceTooShort { frames, tau })
            }
        }
    }
}

/// Decodes an uploaded WAV and resamples it to the analysis rate, checking the
/// length limits.
pub fn decode_upload(bytes: &[u8], cfg: &MelConfig, tau: usize) -> Result<Waveform, UploadProblem> {
    let w = decode_wav(bytes).map_err(|e| UploadProblem::Undecodable(e.to_string()))?;
    if w.sample_rate == 0 || w.is_empty() {
        return Err(UploadProblem::Undecodable("no samples".into()));
    }
    if w.duration_secs() > MAX_UPLOAD_SECS {
        return Err(UploadProblem::TooLong(w.duration_secs()));
    }
    let w = if w.sample_rate == cfg.sample_rate {
        w
    } else {
        resample(&w, cfg.sample_rate)
    };
    let frames = frame_count(w.len(), cfg);
    if frames < tau {
        return Err(UploadProblem::TooShort { frames, tau });
    }
    Ok(w)
}

fn segmentation(shared: &Shared, job_id: &str, prompt: &Prompt, alignment: Option<&str>, w: &Waveform) -> Result<PhonemeSegmentation, ServiceError> {
    let inv = &shared.generator.config.inventory;
    let cfg = &shared.generator.config.mel;
    Ok(match alignment {
        Some(csv) => {
            let raw = parse_alignment_csv(csv, "upload")?;
            validate_alignment(job_id, &raw, inv, w.len(), cfg)?
        }
        None => prompt.proportional_alignment(inv, frame_count(w.len(), cfg))?,
    })
}

fn correct(shared: &Shared, job_id: &str, prompt_id: &str, alignment: Option<&str>) -> Result<JobOutputs, ServiceError> {
    let prompt = shared
        .prompts
        .iter()
        .find(|p| p.id == prompt_id)
        .ok_or_else(|| ServiceError::Internal(format!("prompt {prompt_id:?} disappeared")))?;
    let inv = &shared.generator.config.inventory;
    let bytes = shared
        .store
        .read_artifact(job_id, crate::jobs::INPUT_WAV)?
        .ok_or_else(|| ServiceError::Internal("input recording missing".into()))?;
    let w = decode_upload(&bytes, &shared.generator.config.mel, shared.generator.tau()).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let seg = segmentation(shared, job_id, prompt, alignment, &w)?;
    let rho_star = inv.require(&prompt.rho_star)?;

    let req = CorrectionRequest::new(w, seg, prompt.k, rho_star);
    let corrected = correct_utterance(&req, &shared.generator, &shared.vocoder)?;
    let vocoder_only = shared.vocoder.vocode(&corrected.original_mel)?;

    shared.store.write_artifact(job_id, VOCODER_ONLY_WAV, &encode_wav(&vocoder_only)?)?;
    shared.store.write_artifact(job_id, GENERATED_WAV, &encode_wav(&corrected.waveform)?)?;
    Ok(JobOutputs {
        vocoder_only: VOCODER_ONLY_WAV.into(),
        generated: GENERATED_WAV.into(),
    })
}

/// Runs one queued job to completion. Pipeline failures end in the failed
/// state; store errors are only logged.
pub(crate) fn run_job(shared: &Shared, id: &str) {
    if let Err(e) = try_run_job(shared, id) {
        tracing::error!(job = id, "job store error: {e}");
    }
}

fn try_run_job(shared: &Shared, id: &str) -> Result<(), ServiceError> {
    let Some(mut job) = shared.store.load(id)? else {
        return Err(ServiceError::Internal(format!("job {id} not found")));
    };
    if job.state != JobState::Queued {
        return Ok(());
    }
    shared.store.transition(&mut job, JobState::Running)?;
    tracing::info!(job = id, prompt = %job.prompt_id, "running");
    match correct(shared, id, &job.prompt_id, job.alignment.as_deref()) {
        Ok(outputs) => {
            job.outputs = Some(outputs);
            shared.store.transition(&mut job, JobState::Done)?;
            tracing::info!(job = id, "done");
        }
        Err(e) => {
            tracing::warn!(job = id, "failed: {e}");
            job.error = Some(e.to_string());
            shared.store.transition(&mut job, JobState::Failed)?;
        }
    }
    Ok(())
}

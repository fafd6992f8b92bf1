//! Filesystem job store: one directory per job holding `job.json` and the
//! job's WAV files. Every write goes to a temporary file that is then
//! renamed over the target.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::ServiceError;

pub const JOB_FILE: &str = "job.json";
pub const INPUT_WAV: &str = "input.wav";
pub const VOCODER_ONLY_WAV: &str = "vocoder_only.wav";
pub const GENERATED_WAV: &str = "generated.wav";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutputs {
    pub vocoder_only: String,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionJob {
    pub id: String,
    pub prompt_id: String,
    pub state: JobState,
    pub created_at: f64,
    pub updated_at: f64,
    pub input: String,
    /// Alignment CSV supplied with the upload, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<JobOutputs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone)]
pub struct JobStore {
    root: PathBuf,
}

impl JobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory of job `id`; `None` unless `id` is a well-formed job id, so
    /// request paths can never leave the store.
    pub fn job_dir(&self, id: &str) -> Option<PathBuf> {
        Uuid::parse_str(id).ok().map(|u| self.root.join(u.hyphenated().to_string()))
    }

    pub fn create(&self, prompt_id: &str, input_wav: &[u8], alignment: Option<String>) -> Result<CorrectionJob, ServiceError> {
        let id = Uuid::new_v4().hyphenated().to_string();
        let dir = self.root.join(&id);
        fs::create_dir(&dir)?;
        write_atomic(&dir.join(INPUT_WAV), input_wav)?;
        let t = now();
        let job = CorrectionJob {
            id,
            prompt_id: prompt_id.to_string(),
            state: JobState::Queued,
            created_at: t,
            updated_at: t,
            input: INPUT_WAV.to_string(),
            alignment,
            outputs: None,
            error: None,
        };
        self.save(&job)?;
        Ok(job)
    }

    pub fn load(&self, id: &str) -> Result<Option<CorrectionJob>, ServiceError> {
        let Some(dir) = self.job_dir(id) else {
            return Ok(None);
        };
        match fs::read(dir.join(JOB_FILE)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn save(&self, job: &CorrectionJob) -> Result<(), ServiceError> {
        let dir = self.job_dir(&job.id).ok_or_else(|| ServiceError::Internal("bad job id".into()))?;
        write_atomic(&dir.join(JOB_FILE), &serde_json::to_vec_pretty(job)?)
    }

    /// Moves a job forward. Backward moves and changes to finished jobs are
    /// refused.
    pub fn transition(&self, job: &mut CorrectionJob, state: JobState) -> Result<(), ServiceError> {
        if job.state.is_terminal() || state <= job.state {
            return Err(ServiceError::Internal(format!(
                "job {} cannot go from {:?} to {state:?}",
                job.id, job.state
            )));
        }
        if state == JobState::Done && job.outputs.is_none() {
            return Err(ServiceError::Internal("done without outputs".into()));
        }
        if state == JobState::Failed && job.error.as_deref().is_none_or(str::is_empty) {
            return Err(ServiceError::Internal("failed without detail".into()));
        }
        job.state = state;
        job.updated_at = now();
        self.save(job)
    }

    pub fn write_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> Result<(), ServiceError> {
        let dir = self.job_dir(id).ok_or_else(|| ServiceError::Internal("bad job id".into()))?;
        write_atomic(&dir.join(name), bytes)
    }

    pub fn read_artifact(&self, id: &str, name: &str) -> Result<Option<Vec<u8>>, ServiceError> {
        let Some(dir) = self.job_dir(id) else {
            return Ok(None);
        };
        match fs::read(dir.join(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// All jobs on disk, oldest first.
    pub fn list(&self) -> Result<Vec<CorrectionJob>, ServiceError> {
        let mut jobs = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            if let Some(job) = self.load(&name.to_string_lossy())? {
                jobs.push(job);
            }
        }
        jobs.sort_by(|a, b| a.created_at.total_cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(jobs)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension(format!("tmp-{}", Uuid::new_v4().simple()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

//! HTTP front end for the correction pipeline: prompts, recording upload,
//! polling for results and blind A/B pairs.

pub mod api;
pub mod jobs;
pub mod pipeline;
pub mod prompts;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use inpaint_core::correction::{Vocoder, VocoderKind};
use inpaint_core::dsp::DEFAULT_GRIFFIN_LIM_ITERS;
use inpaint_core::generator::Generator;
use thiserror::Error;
use tokio::sync::{mpsc, Mutex};

pub use api::router;
pub use jobs::{CorrectionJob, JobState, JobStore};
pub use prompts::{load_prompts, Prompt};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_WORKERS: usize = 2;
pub const MAX_UPLOAD_BYTES: usize = 2 * 1024 * 1024;
pub const MAX_UPLOAD_SECS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] inpaint_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

/// Error returned to HTTP clients as `{"error": "..."}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        tracing::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    /// Generator checkpoint, or a directory holding one under `generator/`.
    pub ckpt_dir: PathBuf,
    pub prompts_path: PathBuf,
    pub jobs_dir: PathBuf,
    pub port: u16,
    pub workers: usize,
    pub vocoder: VocoderKind,
}

impl ServiceConfig {
    /// Reads `CKPT_DIR`, `PROMPTS_PATH`, `JOBS_DIR`, `PORT`, `WORKERS`,
    /// `GL_ITERS` and `VOCODER_COMMAND`.
    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let required = |k: &str| {
            get(k)
                .filter(|v| !v.trim().is_empty())
                .map(PathBuf::from)
                .ok_or_else(|| ServiceError::Config(format!("{k} is not set")))
        };
        fn parsed<T: std::str::FromStr>(k: &str, v: Option<String>, default: T) -> Result<T, ServiceError> {
            match v {
                None => Ok(default),
                Some(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| ServiceError::Config(format!("{k}={v:?} is not a valid value"))),
            }
        }
        let workers = parsed("WORKERS", get("WORKERS"), DEFAULT_WORKERS)?;
        if workers == 0 {
            return Err(ServiceError::Config("WORKERS must be at least 1".into()));
        }
        let vocoder = match get("VOCODER_COMMAND").filter(|c| !c.trim().is_empty()) {
            Some(cmd) => VocoderKind::ExternalNeural {
                command: cmd.split_whitespace().map(str::to_string).collect(),
            },
            None => VocoderKind::GriffinLim {
                iterations: parsed("GL_ITERS", get("GL_ITERS"), DEFAULT_GRIFFIN_LIM_ITERS)?,
            },
        };
        Ok(Self {
            ckpt_dir: required("CKPT_DIR")?,
            prompts_path: required("PROMPTS_PATH")?,
            jobs_dir: required("JOBS_DIR")?,
            port: parsed("PORT", get("PORT"), DEFAULT_PORT)?,
            workers,
            vocoder,
        })
    }
}

pub fn load_generator(ckpt_dir: &Path) -> Result<Generator, ServiceError> {
    let dir = if ckpt_dir.join(inpaint_core::checkpoint::CONFIG_FILE).exists() {
        ckpt_dir.to_path_buf()
    } else {
        ckpt_dir.join("generator")
    };
    Ok(Generator::load(dir)?)
}

pub(crate) struct Shared {
    pub prompts: Vec<Prompt>,
    pub generator: Generator,
    pub vocoder: Vocoder,
    pub store: JobStore,
    queue: mpsc::UnboundedSender<String>,
}

#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Shared>,
}

impl AppState {
    /// Starts `workers` correction workers on the current tokio runtime.
    /// Jobs left queued by a previous run are requeued; jobs that were
    /// running are marked failed.
    pub fn start(
        prompts: Vec<Prompt>,
        generator: Generator,
        vocoder: Vocoder,
        store: JobStore,
        workers: usize,
    ) -> Result<Self, ServiceError> {
        for p in &prompts {
            p.validate(&generator.config.inventory)?;
        }
        let (tx, rx) = mpsc::unbounded_channel();
        let state = AppState {
            inner: Arc::new(Shared {
                prompts,
                generator,
                vocoder,
                store,
                queue: tx,
            }),
        };
        for mut job in state.inner.store.list()? {
            match job.state {
                JobState::Queued => state.enqueue(job.id),
                JobState::Running => {
                    job.error = Some("interrupted by a service restart".into());
                    state.inner.store.transition(&mut job, JobState::Failed)?;
                }
                JobState::Done | JobState::Failed => {}
            }
        }
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let (rx, state) = (rx.clone(), state.clone());
            tokio::spawn(async move {
                loop {
                    let Some(id) = rx.lock().await.recv().await else {
                        break;
                    };
                    let shared = state.inner.clone();
                    let run = tokio::task::spawn_blocking(move || pipeline::run_job(&shared, &id));
                    if let Err(e) = run.await {
                        tracing::error!("worker task panicked: {e}");
                    }
                }
            });
        }
        Ok(state)
    }

    /// Loads prompts, checkpoint and job store as configured.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let generator = load_generator(&cfg.ckpt_dir)?;
        let prompts = load_prompts(&cfg.prompts_path, &generator.config.inventory)?;
        let vocoder = Vocoder::new(cfg.vocoder.clone(), generator.config.mel)?;
        let store = JobStore::open(&cfg.jobs_dir)?;
        Self::start(prompts, generator, vocoder, store, cfg.workers)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.inner.prompts
    }

    pub fn store(&self) -> &JobStore {
        &self.inner.store
    }

    pub fn tau(&self) -> usize {
        self.inner.generator.tau()
    }

    fn enqueue(&self, id: String) {
        if self.inner.queue.send(id).is_err() {
            tracing::error!("job queue closed");
        }
    }
}

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use inpaint_core::corpus::parse_alignment_csv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jobs::{CorrectionJob, JobState, GENERATED_WAV, INPUT_WAV, VOCODER_ONLY_WAV};
use crate::pipeline::{decode_upload, UploadProblem};
use crate::{ApiError, AppState, Prompt, MAX_UPLOAD_BYTES};

type ApiResult<T> = Result<T, ApiError>;

/// Room for multipart framing and the small text fields.
const FORM_OVERHEAD: usize = 64 * 1024;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/prompts", get(list_prompts))
        .route("/api/recordings", post(submit_recording))
        .route("/api/corrections/{id}", get(fetch_correction))
        .route("/api/ab/{id}", get(fetch_ab_pair))
        .route("/api/ab/{id}/reveal", get(reveal_ab))
        .route("/api/ab/{id}/{label}", get(ab_audio))
        .route("/api/audio/{id}/{name}", get(audio))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + FORM_OVERHEAD))
        .with_state(state)
}

async fn list_prompts(State(state): State<AppState>) -> Json<Vec<Prompt>> {
    Json(state.prompts().to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
}

async fn submit_recording(State(state): State<AppState>, mut form: Multipart) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let (mut prompt_id, mut audio, mut alignment) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "prompt_id" => prompt_id = Some(text_field("prompt_id", data)?),
            "audio" => audio = Some(data),
            "alignment" => alignment = Some(text_field("alignment", data)?),
            _ => {}
        }
    }
    let prompt_id = prompt_id.ok_or_else(|| ApiError::unprocessable("missing field prompt_id"))?;
    let audio = audio.ok_or_else(|| ApiError::unprocessable("missing field audio"))?;
    if !state.prompts().iter().any(|p| p.id == prompt_id) {
        return Err(ApiError::not_found(format!("prompt {prompt_id:?}")));
    }
    if audio.len() > MAX_UPLOAD_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload of {} bytes exceeds {MAX_UPLOAD_BYTES}", audio.len()),
        ));
    }
    let check = audio.clone();
    let (mel, tau) = (state.inner.generator.config.mel, state.tau());
    tokio::task::spawn_blocking(move || decode_upload(&check, &mel, tau))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|p| match p {
            UploadProblem::TooLong(_) => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, p.to_string()),
            p => ApiError::unprocessable(p.to_string()),
        })?;
    if let Some(csv) = &alignment {
        parse_alignment_csv(csv, "alignment").map_err(|e| ApiError::unprocessable(e.to_string()))?;
    }
    let job = state.store().create(&prompt_id, &audio, alignment)?;
    tracing::info!(job = %job.id, prompt = %prompt_id, "queued");
    state.enqueue(job.id.clone());
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id: job.id })))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    ApiError::new(e.status(), e.body_text())
}

fn text_field(name: &str, data: Bytes) -> ApiResult<String> {
    String::from_utf8(data.to_vec()).map_err(|_| ApiError::unprocessable(format!("field {name} is not UTF-8")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioUrls {
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocoder_only: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub prompt_id: String,
    pub state: JobState,
    pub created_at: f64,
    pub updated_at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub audio: AudioUrls,
}

fn audio_url(id: &str, name: &str) -> String {
    format!("/api/audio/{id}/{name}")
}

impl From<CorrectionJob> for JobView {
    fn from(job: CorrectionJob) -> Self {
        let audio = AudioUrls {
            input: audio_url(&job.id, &job.input),
            vocoder_only: job.outputs.as_ref().map(|o| audio_url(&job.id, &o.vocoder_only)),
            generated: job.outputs.as_ref().map(|o| audio_url(&job.id, &o.generated)),
        };
        JobView {
            id: job.id,
            prompt_id: job.prompt_id,
            state: job.state,
            created_at: job.created_at,
            updated_at: job.updated_at,
            error: job.error,
            audio,
        }
    }
}

fn load_job(state: &AppState, id: &str) -> ApiResult<CorrectionJob> {
    state
        .store()
        .load(id)?
        .ok_or_else(|| ApiError::not_found(format!("job {id:?}")))
}

async fn fetch_correction(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    Ok(Json(load_job(&state, &id)?.into()))
}

#[derive(Debug, Default, Deserialize)]
pub struct AbQuery {
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbOption {
    pub label: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbPair {
    pub job_id: String,
    pub seed: u64,
    pub options: Vec<AbOption>,
    /// Opaque token for the reveal endpoint and the labelled audio.
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReveal {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
}

/// Which output sits behind A and B for this job and seed.
fn ab_mapping(job_id: &str, seed: u64) -> [&'static str; 2] {
    let uuid = uuid::Uuid::parse_str(job_id).map(|u| u.as_u128()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (uuid as u64) ^ ((uuid >> 64) as u64));
    if rng.gen_bool(0.5) {
        [GENERATED_WAV, VOCODER_ONLY_WAV]
    } else {
        [VOCODER_ONLY_WAV, GENERATED_WAV]
    }
}

fn ab_token(job_id: &str, seed: u64) -> String {
    URL_SAFE_NO_PAD.encode(format!("{job_id}:{seed}"))
}

fn parse_ab_token(job_id: &str, token: &str) -> ApiResult<u64> {
    let bad = || ApiError::unprocessable("invalid reveal token");
    let text = String::from_utf8(URL_SAFE_NO_PAD.decode(token).map_err(|_| bad())?).map_err(|_| bad())?;
    let (id, seed) = text.rsplit_once(':').ok_or_else(bad)?;
    if id != job_id {
        return Err(bad());
    }
    seed.parse().map_err(|_| bad())
}

fn done_job(state: &AppState, id: &str) -> ApiResult<CorrectionJob> {
    let job = load_job(state, id)?;
    if job.state != JobState::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {:?}, not done", job.state),
        ));
    }
    Ok(job)
}

async fn fetch_ab_pair(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AbQuery>,
) -> ApiResult<Json<AbPair>> {
    let job = done_job(&state, &id)?;
    let token = ab_token(&job.id, q.seed);
    let options = ["A", "B"]
        .iter()
        .map(|l| AbOption {
            label: l.to_string(),
            url: format!("/api/ab/{}/{l}?token={token}", job.id),
        })
        .collect();
    Ok(Json(AbPair {
        job_id: job.id,
        seed: q.seed,
        options,
        token,
    }))
}

#[derive(Debug, Deserialize)]
pub struct TokenQuery {
    pub token: String,
}

fn output_name(file: &str) -> String {
    file.trim_end_matches(".wav").to_string()
}

async fn reveal_ab(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Json<AbReveal>> {
    let job = done_job(&state, &id)?;
    let [a, b] = ab_mapping(&job.id, parse_ab_token(&job.id, &q.token)?);
    Ok(Json(AbReveal {
        a: output_name(a),
        b: output_name(b),
    }))
}

async fn ab_audio(
    State(state): State<AppState>,
    Path((id, label)): Path<(String, String)>,
    Query(q): Query<TokenQuery>,
) -> ApiResult<Response> {
    let job = done_job(&state, &id)?;
    let [a, b] = ab_mapping(&job.id, parse_ab_token(&job.id, &q.token)?);
    let name = match label.as_str() {
        "A" => a,
        "B" => b,
        _ => return Err(ApiError::not_found(format!("label {label:?}"))),
    };
    wav_response(&state, &job.id, name)
}

async fn audio(State(state): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    if ![INPUT_WAV, VOCODER_ONLY_WAV, GENERATED_WAV].contains(&name.as_str()) {
        return Err(ApiError::not_found(format!("audio {name:?}")));
    }
    let job = load_job(&state, &id)?;
    // outputs are only served once the job has finished writing them
    if name != INPUT_WAV && job.state != JobState::Done {
        return Err(ApiError::not_found(format!("audio {name:?}")));
    }
    wav_response(&state, &job.id, &name)
}

fn wav_response(state: &AppState, id: &str, name: &str) -> ApiResult<Response> {
    let bytes = state
        .store()
        .read_artifact(id, name)?
        .ok_or_else(|| ApiError::not_found(format!("audio {name:?}")))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

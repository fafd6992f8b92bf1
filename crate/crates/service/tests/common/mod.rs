#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use inpaint_core::correction::{Vocoder, VocoderKind};
use inpaint_core::dsp::{encode_wav, MelConfig, Waveform};
use inpaint_core::generator::{Generator, GeneratorConfig};
use inpaint_core::problem::PhonemeInventory;
use inpaint_service::{AppState, JobStore, Prompt};
use tower::ServiceExt;

pub const TAU: usize = 64;
pub const BOUNDARY: &str = "inpaint-test-boundary";

pub fn inventory() -> PhonemeInventory {
    PhonemeInventory::new(["sil", "A", "B", "C"], "sil").unwrap()
}

/// Untrained small generator; the service contract does not depend on
/// output quality.
pub fn generator() -> Generator {
    let cfg = GeneratorConfig {
        phoneme_embed_dim: 4,
        channels: [8, 8, 8, 8, 8],
        ..GeneratorConfig::new(TAU, inventory(), MelConfig::default())
    };
    Generator::new(cfg, 5).unwrap()
}

pub fn prompts() -> Vec<Prompt> {
    let p = |id: &str, word: &str, phonemes: &[&str], k, rho: &str| Prompt {
        id: id.into(),
        word: word.into(),
        phonemes: phonemes.iter().map(|s| s.to_string()).collect(),
        k,
        rho_star: rho.into(),
        durations: vec![3.0, 2.0, 1.0, 2.0, 3.0],
    };
    vec![
        p("aba", "aba", &["sil", "A", "B", "A", "sil"], 2, "C"),
        p("aca", "aca", &["sil", "A", "C", "A", "sil"], 2, "B"),
        p("bab", "bab", &["sil", "B", "A", "B", "sil"], 2, "C"),
    ]
}

pub fn start(jobs_dir: &Path, workers: usize) -> AppState {
    let g = generator();
    let vocoder = Vocoder::new(VocoderKind::GriffinLim { iterations: 8 }, g.config.mel).unwrap();
    AppState::start(prompts(), g, vocoder, JobStore::open(jobs_dir).unwrap(), workers).unwrap()
}

/// Voiced tone with a slow amplitude envelope.
pub fn recording(secs: f64, rate: u32) -> Vec<u8> {
    let n = (secs * rate as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let env = 0.2 + 0.8 * (std::f64::consts::PI * 3.0 * t).sin().abs();
            let v: f64 = (1..8)
                .map(|h| (2.0 * std::f64::consts::PI * 150.0 * h as f64 * t).sin() / h as f64)
                .sum();
            (0.15 * env * v) as f32
        })
        .collect();
    encode_wav(&Waveform::new(samples, rate)).unwrap()
}

pub fn multipart(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "audio" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"audio\"; filename=\"rec.wav\"\r\nContent-Type: audio/wav\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, serde_json::Value) {
    let (status, body) = get(app, uri).await;
    (status, serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null))
}

pub async fn submit(app: &Router, fields: &[(&str, &[u8])]) -> (StatusCode, serde_json::Value) {
    let req = Request::post("/api/recordings")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(fields)))
        .unwrap();
    let (status, body) = call(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null))
}

/// Polls a job until it leaves the queue, recording every state seen.
pub async fn poll(app: &Router, id: &str, limit: Duration) -> (serde_json::Value, Vec<String>) {
    let start = Instant::now();
    let mut seen = Vec::new();
    loop {
        let (status, job) = get_json(app, &format!("/api/corrections/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        let state = job["state"].as_str().unwrap().to_string();
        if seen.last() != Some(&state) {
            seen.push(state.clone());
        }
        if state == "done" || state == "failed" || start.elapsed() > limit {
            return (job, seen);
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

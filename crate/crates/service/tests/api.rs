mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use inpaint_core::dsp::decode_wav;
use inpaint_service::{router, AppState, JobState, ServiceConfig, ServiceError};

const STATE_ORDER: [&str; 4] = ["queued", "running", "done", "failed"];

fn assert_monotone(seen: &[String]) {
    let ranks: Vec<usize> = seen
        .iter()
        .map(|s| STATE_ORDER.iter().position(|o| o == s).unwrap())
        .collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn submit_poll_done_and_fetch_audio() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(start(dir.path(), 2));

    let (status, prompts) = get_json(&app, "/api/prompts").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = prompts.as_array().unwrap().iter().map(|p| p["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["aba", "aca", "bab"]);

    let wav = recording(1.0, 22_050);
    let (status, body) = submit(&app, &[("prompt_id", b"aba"), ("audio", &wav)]).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["job_id"].as_str().unwrap().to_string();

    let (_, first) = get_json(&app, &format!("/api/corrections/{id}")).await;
    assert!(["queued", "running"].contains(&first["state"].as_str().unwrap()));
    let (job, seen) = poll(&app, &id, Duration::from_secs(30)).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_monotone(&seen);
    assert!(job.get("error").is_none());

    for key in ["input", "vocoder_only", "generated"] {
        let url = job["audio"][key].as_str().unwrap();
        let (status, bytes) = get(&app, url).await;
        assert_eq!(status, StatusCode::OK, "{url}");
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate, 22_050);
        assert!(w.len() > 20_000);
    }
    assert_eq!(get(&app, &format!("/api/audio/{id}/job.json")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resampled_upload_and_external_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(start(dir.path(), 1));
    // 16 kHz input is resampled; 1 s at 22050 Hz gives 87 frames
    let wav = recording(1.0, 16_000);
    let csv = "total_frames=87\nsil,0\nA,20\nC,40\nA,50\nsil,70\n";
    let (status, body) = submit(&app, &[("prompt_id", b"aca"), ("audio", &wav), ("alignment", csv.as_bytes())]).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    let (job, _) = poll(&app, body["job_id"].as_str().unwrap(), Duration::from_secs(30)).await;
    assert_eq!(job["state"], "done", "{job}");

    // an alignment that disagrees with the audio fails the job with detail
    let csv = "total_frames=300\nsil,0\nA,100\nC,150\nA,200\nsil,250\n";
    let (status, body) = submit(&app, &[("prompt_id", b"aca"), ("audio", &wav), ("alignment", csv.as_bytes())]).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["job_id"].as_str().unwrap();
    let (job, seen) = poll(&app, id, Duration::from_secs(30)).await;
    assert_eq!(job["state"], "failed");
    assert_monotone(&seen);
    assert!(job["error"].as_str().unwrap().contains("frames"), "{job}");
    assert!(job["audio"].get("generated").is_none());
    assert_eq!(get(&app, &format!("/api/ab/{id}")).await.0, StatusCode::CONFLICT);

    let (status, body) = submit(&app, &[("prompt_id", b"aca"), ("audio", &wav), ("alignment", b"nonsense")]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let state = start(dir.path(), 1);
    let app = router(state.clone());
    let wav = recording(1.0, 22_050);

    let (status, body) = submit(&app, &[("prompt_id", b"nope"), ("audio", &wav)]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());

    let short = recording(0.1, 22_050);
    let (status, body) = submit(&app, &[("prompt_id", b"aba"), ("audio", &short)]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("utterance too short"), "{body}");

    let (status, _) = submit(&app, &[("prompt_id", b"aba"), ("audio", b"not a wav file")]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = submit(&app, &[("prompt_id", b"aba")]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // 11 s at 8 kHz fits in 2 MB but is too long
    let long = recording(11.0, 8_000);
    let (status, _) = submit(&app, &[("prompt_id", b"aba"), ("audio", &long)]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    let huge = vec![0u8; 3 * 1024 * 1024];
    let (status, _) = submit(&app, &[("prompt_id", b"aba"), ("audio", &huge)]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let unknown = "00000000-0000-4000-8000-000000000000";
    for uri in [
        format!("/api/corrections/{unknown}"),
        "/api/corrections/not-a-uuid".to_string(),
        format!("/api/ab/{unknown}"),
        format!("/api/audio/{unknown}/input.wav"),
    ] {
        assert_eq!(get(&app, &uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }

    // a job that is never queued stays queued, so its pair is a conflict
    let parked = state.store().create("aba", &wav, None).unwrap();
    let (status, body) = get_json(&app, &format!("/api/ab/{}", parked.id)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].is_string());
    assert_eq!(
        get(&app, &format!("/api/audio/{}/generated.wav", parked.id)).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(get(&app, &format!("/api/audio/{}/input.wav", parked.id)).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ab_pairs_are_seeded_and_revealable() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(start(dir.path(), 2));
    let wav = recording(1.0, 22_050);
    let (_, body) = submit(&app, &[("prompt_id", b"bab"), ("audio", &wav)]).await;
    let id = body["job_id"].as_str().unwrap().to_string();
    let (job, _) = poll(&app, &id, Duration::from_secs(30)).await;
    assert_eq!(job["state"], "done");
    let (_, generated) = get(&app, job["audio"]["generated"].as_str().unwrap()).await;
    let (_, vocoder_only) = get(&app, job["audio"]["vocoder_only"].as_str().unwrap()).await;
    assert_ne!(generated, vocoder_only);

    let mut orders = std::collections::BTreeSet::new();
    for seed in 0..16 {
        let uri = format!("/api/ab/{id}?seed={seed}");
        let (status, pair) = get_json(&app, &uri).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(get_json(&app, &uri).await.1, pair);
        let labels: Vec<&str> = pair["options"].as_array().unwrap().iter().map(|o| o["label"].as_str().unwrap()).collect();
        assert_eq!(labels, ["A", "B"]);
        // the labelled URLs must not give the mapping away
        for o in pair["options"].as_array().unwrap() {
            let url = o["url"].as_str().unwrap();
            assert!(!url.contains("generated") && !url.contains("vocoder"));
        }

        let token = pair["token"].as_str().unwrap();
        let (status, reveal) = get_json(&app, &format!("/api/ab/{id}/reveal?token={token}")).await;
        assert_eq!(status, StatusCode::OK);
        let (a, b) = (reveal["A"].as_str().unwrap(), reveal["B"].as_str().unwrap());
        let mut both = [a, b];
        both.sort();
        assert_eq!(both, ["generated", "vocoder_only"]);
        orders.insert(a.to_string());

        let (_, audio_a) = get(&app, pair["options"][0]["url"].as_str().unwrap()).await;
        assert_eq!(audio_a, if a == "generated" { &generated } else { &vocoder_only }.clone());
    }
    assert_eq!(orders.len(), 2, "16 seeds should produce both orders");

    let (status, _) = get_json(&app, &format!("/api/ab/{id}/reveal?token=garbage")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submits_get_distinct_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(start(dir.path(), 2));
    let wav = recording(0.8, 22_050);
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (app, wav) = (app.clone(), wav.clone());
            tokio::spawn(async move { submit(&app, &[("prompt_id", b"aba"), ("audio", &wav)]).await })
        })
        .collect();
    let mut ids = std::collections::BTreeSet::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::ACCEPTED);
        ids.insert(body["job_id"].as_str().unwrap().to_string());
    }
    assert_eq!(ids.len(), 6);
    for id in &ids {
        let (job, seen) = poll(&app, id, Duration::from_secs(60)).await;
        assert_eq!(job["state"], "done", "{job}");
        assert_monotone(&seen);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_requeues_queued_and_fails_running() {
    let dir = tempfile::tempdir().unwrap();
    let wav = recording(1.0, 22_050);
    let (queued, running) = {
        let store = inpaint_service::JobStore::open(dir.path()).unwrap();
        let queued = store.create("aba", &wav, None).unwrap();
        let mut running = store.create("aba", &wav, None).unwrap();
        store.transition(&mut running, JobState::Running).unwrap();
        (queued.id, running.id)
    };
    let app = router(start(dir.path(), 1));
    let (job, _) = poll(&app, &queued, Duration::from_secs(30)).await;
    assert_eq!(job["state"], "done");
    let (_, job) = get_json(&app, &format!("/api/corrections/{running}")).await;
    assert_eq!(job["state"], "failed");
    assert!(job["error"].as_str().unwrap().contains("restart"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn startup_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    generator().save(ckpt.join("generator"), serde_json::json!({})).unwrap();
    let prompts_path = dir.path().join("prompts.json");
    let cfg = |prompts: &std::path::Path| {
        let (c, p, j) = (ckpt.clone(), prompts.to_path_buf(), dir.path().join("jobs"));
        ServiceConfig::from_lookup(move |k| match k {
            "CKPT_DIR" => Some(c.display().to_string()),
            "PROMPTS_PATH" => Some(p.display().to_string()),
            "JOBS_DIR" => Some(j.display().to_string()),
            "GL_ITERS" => Some("4".into()),
            _ => None,
        })
        .unwrap()
    };

    std::fs::write(&prompts_path, serde_json::to_vec(&prompts()).unwrap()).unwrap();
    let state = AppState::from_config(&cfg(&prompts_path)).unwrap();
    assert_eq!(state.prompts().len(), 3);
    assert_eq!(state.tau(), TAU);

    std::fs::write(&prompts_path, "").unwrap();
    let app = router(AppState::from_config(&cfg(&prompts_path)).unwrap());
    let (status, body) = get_json(&app, "/api/prompts").await;
    assert_eq!((status, body), (StatusCode::OK, serde_json::json!([])));

    for bad in [
        "{not json",
        r#"[{"id":"x","word":"x","phonemes":["A","Q"],"k":0,"rho_star":"B"}]"#,
        r#"[{"id":"x","word":"x","phonemes":["A"],"k":1,"rho_star":"B"}]"#,
    ] {
        std::fs::write(&prompts_path, bad).unwrap();
        assert!(matches!(
            AppState::from_config(&cfg(&prompts_path)),
            Err(ServiceError::Config(_))
        ));
    }
    let missing = dir.path().join("absent.json");
    assert!(matches!(AppState::from_config(&cfg(&missing)), Err(ServiceError::Config(_))));
}

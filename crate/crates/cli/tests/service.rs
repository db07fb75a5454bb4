use std::sync::Arc;

use ehrseq::corpus::{
    generate_synthetic_corpus, generate_synthetic_insurance, ApplicationRecord, GeneratorConfig, InsuranceConfig,
    Vocabulary,
};
use ehrseq::embedding::{average_group_embedding, PoolingStrategy};
use ehrseq::encoder::{EncoderModel, ModelConfig};
use ehrseq::scoring::{fit_scoring, split_by_month, EmbeddingSource, Scheme, LAMBDA_GRID};
use ehrseq_cli::service::{router, AppState, Artifacts, QueryLog, ScoreRequest};
use serde_json::{json, Value};

struct Served {
    base: String,
    state: Arc<AppState>,
    apps: Vec<ApplicationRecord>,
    _dir: tempfile::TempDir,
}

async fn start(scheme: Scheme) -> Served {
    let patients = generate_synthetic_corpus(
        1,
        &GeneratorConfig {
            n_patients: 300,
            n_codes: 40,
            ..Default::default()
        },
    )
    .unwrap();
    let apps = generate_synthetic_insurance(
        2,
        &patients,
        &InsuranceConfig {
            n_apps: 1500,
            positive_rate: 0.2,
            ..Default::default()
        },
    )
    .unwrap();
    let (train, valid) = split_by_month(&apps, 6);
    let artifacts = match scheme {
        Scheme::Base => {
            let fit = fit_scoring(&train, &valid, scheme, None, &LAMBDA_GRID).unwrap();
            Artifacts::from_parts(fit.artifact, None)
        }
        Scheme::Replacement => {
            let v = Vocabulary::build(&patients).unwrap();
            let cfg = ModelConfig {
                d: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 16,
                max_len: 24,
                ..ModelConfig::desk(v.len())
            };
            let m = EncoderModel::new(cfg, v.hash(), 3).unwrap();
            let avg = average_group_embedding(&m, &patients, &v, PoolingStrategy::Mean).unwrap();
            let fit = {
                let src = EmbeddingSource::new(&m, &v, &avg).unwrap();
                fit_scoring(&train, &valid, scheme, Some(&src), &LAMBDA_GRID).unwrap()
            };
            Artifacts::from_parts(fit.artifact, Some((m, v, avg)))
        }
    };
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState {
        artifacts,
        log: QueryLog::open(&dir.path().join("queries.jsonl")).unwrap(),
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Served {
        base,
        state,
        apps,
        _dir: dir,
    }
}

#[tokio::test]
async fn score_matches_offline_and_is_logged() {
    for scheme in [Scheme::Base, Scheme::Replacement] {
        let s = start(scheme).await;
        let client = reqwest::Client::new();
        let sample = &s.apps[..40];
        let offline = s.state.artifacts.score(sample).unwrap();
        for (app, want) in sample.iter().zip(&offline) {
            let resp = client
                .post(format!("{}/score", s.base))
                .json(&ScoreRequest::from_record(app))
                .send()
                .await
                .unwrap();
            assert_eq!(resp.status(), 200);
            let body: Value = resp.json().await.unwrap();
            assert_eq!(body["app_id"], app.app_id.as_str());
            assert!((body["score"].as_f64().unwrap() - want).abs() <= 1e-6);
            assert_eq!(body["model_hash"], s.state.artifacts.model_hash());
        }
        let log = s.state.log.read().unwrap();
        assert_eq!(log.len(), sample.len());
        assert!(log.iter().all(|r| r.payload_hash.len() == 64 && r.latency_ms >= 0.0));
    }
}

#[tokio::test]
async fn malformed_and_mismatched_requests() {
    let s = start(Scheme::Base).await;
    let client = reqwest::Client::new();
    let post = |body: Value| {
        let client = client.clone();
        let url = format!("{}/score", s.base);
        async move { client.post(url).json(&body).send().await.unwrap() }
    };
    let r = post(json!({ "app_id": "a", "gender": "M" })).await;
    assert_eq!(r.status(), 400);
    assert!(r.text().await.unwrap().contains("age"));
    let r = post(json!({ "app_id": "a", "gender": "X", "age": 30 })).await;
    assert_eq!(r.status(), 400);
    assert!(r.text().await.unwrap().contains("gender"));
    let r = post(json!({ "app_id": "a", "gender": "F", "age": 30, "anamnesis": ["I21.0", "not a code"] })).await;
    assert_eq!(r.status(), 400);
    assert!(r.text().await.unwrap().contains("anamnesis[1]"));
    let r = post(json!({ "app_id": "a", "gender": "F", "age": 30, "policy": { "colour": "red" } })).await;
    assert_eq!(r.status(), 422);
    // Nothing above was scored, so nothing was logged.
    assert!(s.state.log.read().unwrap().is_empty());
}

#[tokio::test]
async fn health_and_psi() {
    let s = start(Scheme::Base).await;
    let client = reqwest::Client::new();
    let h: Value = client.get(format!("{}/health", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(h["status"], "ok");
    assert_eq!(h["hashes"]["scorer"], s.state.artifacts.scorer.hash());
    assert_eq!(h["hashes"]["schema"], s.state.artifacts.scorer.schema.hash());

    let r = client.get(format!("{}/psi", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 422, "no logged scores yet");
    for app in s.apps.iter().filter(|a| a.month < 6).take(300) {
        let r = client
            .post(format!("{}/score", s.base))
            .json(&ScoreRequest::from_record(app))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200);
    }
    let a: Value = client.get(format!("{}/psi", s.base)).send().await.unwrap().json().await.unwrap();
    let b: Value = client.get(format!("{}/psi", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(a, b);
    assert_eq!(a["n"], 300);
    assert!(a["psi"].as_f64().unwrap() < 0.1, "{a}");
    let w: Value = client
        .get(format!("{}/psi?last=50", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(w["n"], 50);
    let r = client.get(format!("{}/psi?since=yesterday", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 400);
}

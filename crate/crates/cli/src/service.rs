//! HTTP scoring service: `POST /score`, `GET /health`, `GET /psi`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use ehrseq::corpus::{ApplicationRecord, Gender, IcdCode, Vocabulary};
use ehrseq::embedding::{model_fingerprint, GroupAverages};
use ehrseq::encoder::EncoderModel;
use ehrseq::scoring::{EmbeddingSource, Scheme, ScoringArtifact};
use ehrseq::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub app_id: String,
    pub gender: String,
    pub age: u32,
    #[serde(default)]
    pub anamnesis: Vec<String>,
    #[serde(default)]
    pub policy: BTreeMap<String, String>,
}

impl ScoreRequest {
    pub fn from_record(r: &ApplicationRecord) -> Self {
        Self {
            app_id: r.app_id.clone(),
            gender: r.gender.as_str().into(),
            age: r.age_years,
            anamnesis: r.anamnesis.iter().map(|c| c.as_str().to_string()).collect(),
            policy: r.policy.clone(),
        }
    }

    /// Field-level validation into an application record.
    pub fn into_record(self) -> Result<ApplicationRecord, String> {
        let gender = Gender::parse(&self.gender).ok_or_else(|| format!("gender: expected \"M\" or \"F\", got {:?}", self.gender))?;
        if self.age > 130 {
            return Err(format!("age: {} is out of range", self.age));
        }
        let anamnesis = self
            .anamnesis
            .iter()
            .enumerate()
            .map(|(i, c)| IcdCode::parse(c).map_err(|e| format!("anamnesis[{i}]: {e}")))
            .collect::<Result<_, _>>()?;
        Ok(ApplicationRecord {
            app_id: self.app_id,
            month: 0,
            gender,
            age_years: self.age,
            anamnesis,
            policy: self.policy,
            claim: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    pub timestamp: String,
    pub app_id: String,
    pub payload_hash: String,
    pub score: f64,
    pub model_hash: String,
    pub latency_ms: f64,
}

/// Loaded artifacts; immutable once serving.
pub struct Artifacts {
    pub scorer: ScoringArtifact,
    pub encoder: Option<(EncoderModel, Vocabulary, GroupAverages)>,
    pub hashes: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Default)]
pub struct ArtifactPaths {
    pub scorer: PathBuf,
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub averages: Option<PathBuf>,
}

impl Artifacts {
    /// Loads and cross-checks the artifacts: the vocabulary must match the
    /// encoder and the encoder must be the one the scorer was fitted with.
    pub fn load(paths: &ArtifactPaths) -> anyhow::Result<Self> {
        let scorer = ScoringArtifact::load(&paths.scorer)?;
        let mut hashes = BTreeMap::from([
            ("scorer".to_string(), file_hash(&paths.scorer)?),
            ("schema".to_string(), scorer.schema.hash()),
        ]);
        let encoder = match scorer.schema.scheme {
            Scheme::Base => None,
            Scheme::Replacement => {
                let (Some(m), Some(v), Some(a)) = (&paths.model, &paths.vocab, &paths.averages) else {
                    bail!("replacement scorer needs --model, --vocab and --averages");
                };
                let vocab = Vocabulary::load(v)?;
                let model = EncoderModel::load(m, Some(&vocab.hash()))?;
                let averages = GroupAverages::load(a)?;
                let fp = model_fingerprint(&model);
                if scorer.encoder_hash.as_deref() != Some(fp.as_str()) {
                    bail!(
                        "encoder {fp} is not the one the scorer was fitted with ({})",
                        scorer.encoder_hash.as_deref().unwrap_or("none")
                    );
                }
                EmbeddingSource::new(&model, &vocab, &averages)?;
                hashes.insert("model".into(), file_hash(m)?);
                hashes.insert("vocab".into(), file_hash(v)?);
                hashes.insert("averages".into(), file_hash(a)?);
                Some((model, vocab, averages))
            }
        };
        Ok(Self { scorer, encoder, hashes })
    }

    pub fn from_parts(scorer: ScoringArtifact, encoder: Option<(EncoderModel, Vocabulary, GroupAverages)>) -> Self {
        let mut hashes = BTreeMap::from([("scorer".to_string(), scorer.hash()), ("schema".to_string(), scorer.schema.hash())]);
        if let Some((m, v, _)) = &encoder {
            hashes.insert("model".into(), model_fingerprint(m));
            hashes.insert("vocab".into(), v.hash());
        }
        Self { scorer, encoder, hashes }
    }

    pub fn model_hash(&self) -> &str {
        &self.hashes["scorer"]
    }

    pub fn score(&self, records: &[ApplicationRecord]) -> ehrseq::Result<Vec<f64>> {
        match &self.encoder {
            None => self.scorer.score(records, None),
            Some((m, v, a)) => {
                let src = EmbeddingSource::new(m, v, a)?;
                self.scorer.score(records, Some(&src))
            }
        }
    }
}

/// Append-only JSONL query log; one writer behind a mutex, flushed per
/// record.
pub struct QueryLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl QueryLog {
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening query log {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, rec: &QueryLogRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line)?;
        f.flush()
    }

    pub fn read(&self) -> anyhow::Result<Vec<QueryLogRecord>> {
        // Hold the writer lock so no half-written line is read.
        let _guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        read_log(&self.path)
    }
}

pub fn read_log(path: &Path) -> anyhow::Result<Vec<QueryLogRecord>> {
    let f = File::open(path).with_context(|| format!("opening query log {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("query log line {}", i + 1))?);
    }
    Ok(out)
}

/// Log records in a `/psi` window: `since`/`until` are RFC 3339 bounds
/// (inclusive/exclusive), `last` keeps only the newest N after that.
#[derive(Clone, Debug, Default, Deserialize)]
pub struct PsiWindow {
    pub since: Option<String>,
    pub until: Option<String>,
    pub last: Option<usize>,
}

impl PsiWindow {
    pub fn select(&self, records: &[QueryLogRecord]) -> Result<Vec<f64>, String> {
        let parse = |s: &str| {
            DateTime::parse_from_rfc3339(s)
                .map(|d| d.with_timezone(&Utc))
                .map_err(|e| format!("{s:?}: {e}"))
        };
        let since = self.since.as_deref().map(parse).transpose()?;
        let until = self.until.as_deref().map(parse).transpose()?;
        let mut scores = Vec::new();
        for r in records {
            let t = parse(&r.timestamp)?;
            if since.is_some_and(|s| t < s) || until.is_some_and(|u| t >= u) {
                continue;
            }
            scores.push(r.score);
        }
        if let Some(n) = self.last {
            let skip = scores.len().saturating_sub(n);
            scores.drain(..skip);
        }
        Ok(scores)
    }
}

pub struct AppState {
    pub artifacts: Artifacts,
    pub log: QueryLog,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/health", get(health))
        .route("/psi", get(psi))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn score(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let record = match req.into_record() {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    let payload_hash = hex::encode(Sha256::digest(&body));
    let st = state.clone();
    let scored = tokio::task::spawn_blocking(move || {
        let s = st.artifacts.score(std::slice::from_ref(&record)).map(|v| v[0]);
        (record, s)
    })
    .await;
    let (record, result) = match scored {
        Ok(v) => v,
        Err(e) => {
            tracing::error!(error = %e, "scoring task failed");
            return error(StatusCode::INTERNAL_SERVER_ERROR, "scoring task failed");
        }
    };
    let score = match result {
        Ok(s) => s,
        Err(e @ (Error::UnknownPolicyField(_) | Error::SchemaMismatch { .. })) => {
            return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        Err(e) => {
            tracing::error!(error = %e, app_id = %record.app_id, "scoring failed");
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    };
    let model_hash = state.artifacts.model_hash().to_string();
    let rec = QueryLogRecord {
        timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        app_id: record.app_id.clone(),
        payload_hash,
        score,
        model_hash: model_hash.clone(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    if let Err(e) = state.log.append(&rec) {
        tracing::error!(error = %e, "query log append failed");
        return error(StatusCode::INTERNAL_SERVER_ERROR, "query log unavailable");
    }
    Json(json!({ "app_id": record.app_id, "score": score, "model_hash": model_hash })).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "scheme": state.artifacts.scorer.schema.scheme,
        "hashes": state.artifacts.hashes,
    }))
}

async fn psi(State(state): State<Arc<AppState>>, Query(window): Query<PsiWindow>) -> Response {
    let records = match state.log.read() {
        Ok(r) => r,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let scores = match window.select(&records) {
        Ok(s) => s,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    match state.artifacts.scorer.reference.psi(&scores) {
        Ok(v) => Json(json!({ "psi": v, "n": scores.len(), "bins": state.artifacts.scorer.reference.bins() })).into_response(),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(addr = %listener.local_addr()?, "scoring service listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

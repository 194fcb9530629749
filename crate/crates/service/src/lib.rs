//! HTTP/JSON service over a trained measure VAE and its latent atlas.
//!
//! The server answers `/health` immediately and loads the checkpoint in the
//! background. `POST /input` encodes a measure and starts (or reuses) the atlas
//! build for it; while the build runs, atlas-backed endpoints answer 503 with the
//! completed fraction. One input is active at a time; finished atlases are cached
//! by (checkpoint hash, input hash) in memory and, optionally, on disk.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use lsrvae::atlas::{
    build_atlas, cell_index, interpretability, AtlasCell, InterpretabilityReport, LatentAtlas, LatentStats, Pad,
    GRID_SAMPLES, MIDI_TEMPO_BPM,
};
use lsrvae::attributes::ATTRIBUTE_NAMES;
use lsrvae::checkpoint::{sha256_hex, write_atomic};
use lsrvae::corpus::{load_corpus, synthetic_corpus};
use lsrvae::midi::{from_midi, to_midi};
use lsrvae::model::REGULARISED_DIMS;
use lsrvae::{Checkpoint64, Measure, NoteEvent};

/// Fallback corpus for sampling limits when none is configured.
const FALLBACK_CORPUS_SIZE: usize = 500;
const FALLBACK_CORPUS_SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("could not read checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: lsrvae::checkpoint::CheckpointError },
    #[error("could not read corpus: {0}")]
    Corpus(#[from] lsrvae::corpus::CorpusError),
    #[error("atlas statistics: {0}")]
    Atlas(#[from] lsrvae::atlas::AtlasError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A checkpoint ready to serve: parameters plus the training-set statistics
/// that fix the atlas sampling limits.
pub struct LoadedModel {
    pub checkpoint: Checkpoint64,
    pub hash: String,
    pub stats: LatentStats,
    pub interpretability: Option<InterpretabilityReport>,
}

impl LoadedModel {
    pub fn new(checkpoint: Checkpoint64, hash: String, corpus: &[Measure]) -> Result<Self, LoadError> {
        let stats = LatentStats::from_corpus(&checkpoint.params, corpus)?;
        let interpretability = interpretability(&checkpoint.params, corpus, &checkpoint.profile).ok();
        Ok(Self { checkpoint, hash, stats, interpretability })
    }

    /// Loads a checkpoint file and the corpus used for limits (a seeded synthetic corpus if `None`).
    pub fn load(checkpoint: &Path, corpus: Option<&Path>) -> Result<Self, LoadError> {
        let bytes = std::fs::read(checkpoint)?;
        let hash = sha256_hex(&bytes);
        let ck = Checkpoint64::from_bytes(&bytes)
            .map_err(|source| LoadError::Checkpoint { path: checkpoint.to_path_buf(), source })?;
        let vocab = *ck.params.vocabulary();
        let measures = match corpus {
            Some(p) => load_corpus(p, &vocab)?,
            None => {
                log::warn!("no corpus given; sampling limits come from a synthetic corpus");
                synthetic_corpus(FALLBACK_CORPUS_SIZE, FALLBACK_CORPUS_SEED, &vocab)
            }
        };
        Self::new(ck, hash, &measures)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Directory for atlas manifests keyed by checkpoint and input hash.
    pub atlas_cache_dir: Option<PathBuf>,
}

type AtlasKey = (String, String);

enum Build {
    Running(Arc<AtomicU64>),
    Ready(Arc<LatentAtlas>),
    Failed(String),
}

/// Shared server state. Everything handed to request handlers is immutable once
/// built; the mutexes only guard swapping in new builds and sessions.
pub struct AppState {
    options: ServiceOptions,
    model: RwLock<Option<Arc<LoadedModel>>>,
    /// Atlas key of the active input.
    session: Mutex<Option<AtlasKey>>,
    builds: Mutex<HashMap<AtlasKey, Build>>,
}

impl AppState {
    pub fn new(options: ServiceOptions) -> Arc<Self> {
        Arc::new(Self {
            options,
            model: RwLock::new(None),
            session: Mutex::new(None),
            builds: Mutex::new(HashMap::new()),
        })
    }

    pub fn install_model(&self, model: LoadedModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.read().expect("model lock").clone().ok_or(ApiError::Loading)
    }

    fn cache_path(&self, key: &AtlasKey) -> Option<PathBuf> {
        self.options
            .atlas_cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}_{}.json", &key.0[..16.min(key.0.len())], &key.1[..16])))
    }

    /// Returns the build state for `key`, starting a build if none exists.
    fn ensure_build(self: &Arc<Self>, key: AtlasKey, input: Measure, model: Arc<LoadedModel>) -> Result<Arc<LatentAtlas>, ApiError> {
        let mut builds = self.builds.lock().expect("builds lock");
        match builds.get(&key) {
            Some(Build::Ready(a)) => return Ok(a.clone()),
            Some(Build::Running(p)) => return Err(ApiError::Building(f64::from_bits(p.load(Ordering::SeqCst)))),
            Some(Build::Failed(m)) => return Err(ApiError::Internal(m.clone())),
            None => {}
        }
        if let Some(path) = self.cache_path(&key) {
            if let Ok(bytes) = std::fs::read(&path) {
                match LatentAtlas::from_manifest_bytes(&bytes) {
                    Ok(a) if a.checkpoint_hash == key.0 && a.input == input => {
                        let a = Arc::new(a);
                        builds.insert(key, Build::Ready(a.clone()));
                        return Ok(a);
                    }
                    _ => log::warn!("ignoring unusable atlas cache entry {}", path.display()),
                }
            }
        }
        let progress = Arc::new(AtomicU64::new(0f64.to_bits()));
        builds.insert(key.clone(), Build::Running(progress.clone()));
        drop(builds);

        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let report = |f: f64| progress.store(f.to_bits(), Ordering::SeqCst);
            let ck = &model.checkpoint;
            let result = build_atlas(&input, &ck.params, &model.stats, &ck.profile, &model.hash, &report);
            let entry = match result {
                Ok(atlas) => {
                    if let Some(path) = state.cache_path(&key) {
                        if let Err(e) = write_atomic(&path, &atlas.manifest_bytes()) {
                            log::warn!("could not cache atlas: {e}");
                        }
                    }
                    log::info!("atlas ready for input {}", &key.1[..16]);
                    Build::Ready(Arc::new(atlas))
                }
                Err(e) => {
                    log::error!("atlas build failed: {e}");
                    Build::Failed(e.to_string())
                }
            };
            state.builds.lock().expect("builds lock").insert(key, entry);
        });
        Err(ApiError::Building(0.0))
    }

    /// The active session's atlas.
    fn atlas(&self) -> Result<Arc<LatentAtlas>, ApiError> {
        let session = self.session.lock().expect("session lock");
        let key = session.as_ref().ok_or(ApiError::NoAtlas)?;
        match self.builds.lock().expect("builds lock").get(key) {
            Some(Build::Ready(a)) => Ok(a.clone()),
            Some(Build::Running(p)) => Err(ApiError::Building(f64::from_bits(p.load(Ordering::SeqCst)))),
            Some(Build::Failed(m)) => Err(ApiError::Internal(m.clone())),
            None => Err(ApiError::NoAtlas),
        }
    }

    fn atlas_status(&self) -> (&'static str, f64) {
        match self.atlas() {
            Ok(_) => ("ready", 1.0),
            Err(ApiError::Building(p)) => ("building", p),
            Err(ApiError::Internal(_)) => ("failed", 0.0),
            Err(_) => ("none", 0.0),
        }
    }
}

/// Error responses: `{"error": kind, "message": text}` plus `progress` on 503.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("model is still loading")]
    Loading,
    #[error("atlas build in progress")]
    Building(f64),
    #[error("no atlas: post an input first")]
    NoAtlas,
    #[error("{message}")]
    BadInput { kind: &'static str, message: String },
    #[error("grid indices must be integers in 0..{GRID_SAMPLES}")]
    IndexOutOfRange,
    #[error("unknown pad {0:?}; expected left or right")]
    UnknownPad(String),
    #[error("unknown cell {0:?}")]
    UnknownCell(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Loading | ApiError::Building(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NoAtlas | ApiError::UnknownCell(_) => StatusCode::NOT_FOUND,
            ApiError::BadInput { .. } => StatusCode::BAD_REQUEST,
            ApiError::IndexOutOfRange | ApiError::UnknownPad(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Loading => "Loading",
            ApiError::Building(_) => "AtlasBuilding",
            ApiError::NoAtlas => "NoAtlas",
            ApiError::BadInput { kind, .. } => kind,
            ApiError::IndexOutOfRange => "IndexOutOfRange",
            ApiError::UnknownPad(_) => "UnknownPad",
            ApiError::UnknownCell(_) => "UnknownCell",
            ApiError::Internal(_) => "Internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind(), "message": self.to_string() });
        if let ApiError::Building(p) = self {
            body["progress"] = json!(p);
        }
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize)]
struct Event {
    onset_slot: u8,
    pitch: u8,
    duration_slots: u8,
}

fn events(m: &Measure) -> Vec<Event> {
    m.events()
        .into_iter()
        .map(|NoteEvent { onset_slot, pitch, duration_slots }| Event { onset_slot, pitch, duration_slots })
        .collect()
}

fn attribute_json(cell: &AtlasCell) -> Value {
    json!({
        "rhythmic_complexity": cell.attributes.rhythmic_complexity,
        "note_range": cell.attributes.note_range,
        "note_density": cell.attributes.note_density,
        "avg_interval_jump": cell.attributes.avg_interval_jump,
    })
}

fn cell_name(i: [usize; REGULARISED_DIMS]) -> String {
    format!("{}_{}_{}_{}", i[0], i[1], i[2], i[3])
}

fn parse_input(headers: &HeaderMap, body: &[u8], model: &LoadedModel) -> Result<Measure, ApiError> {
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let is_midi = body.starts_with(b"MThd") || content_type.starts_with("audio/midi") || content_type.starts_with("audio/x-midi");
    let vocab = model.checkpoint.params.vocabulary();
    if is_midi {
        let m = from_midi(body).map_err(|e| ApiError::BadInput { kind: e.kind(), message: e.to_string() })?;
        for p in m.pitches() {
            vocab.check_pitch(p).map_err(|e| ApiError::BadInput { kind: e.kind(), message: e.to_string() })?;
        }
        Ok(m)
    } else {
        let text = std::str::from_utf8(body)
            .map_err(|_| ApiError::BadInput { kind: "UnknownToken", message: "input is neither MIDI nor UTF-8 text".into() })?;
        Measure::parse_with(text.trim(), vocab).map_err(|e| ApiError::BadInput { kind: e.kind(), message: e.to_string() })
    }
}

async fn post_input(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    let model = state.model()?;
    let input = parse_input(&headers, &body, &model)?;
    let input_hash = sha256_hex(input.to_string().as_bytes());
    let key = (model.hash.clone(), input_hash.clone());
    *state.session.lock().expect("session lock") = Some(key.clone());
    let atlas = state.ensure_build(key, input, model)?;
    let dots = atlas.input_dims();
    Ok(Json(json!({
        "tokens": input.to_string(),
        "events": events(&input),
        "dots": dots,
        "nearest": atlas.nearest_cell(),
        "input_hash": input_hash,
    })))
}

/// Parses `i0..i3` from the query; anything missing or outside `0..10` is rejected.
fn grid_query(q: &HashMap<String, String>) -> Result<[usize; REGULARISED_DIMS], ApiError> {
    let mut out = [0; REGULARISED_DIMS];
    for (d, slot) in out.iter_mut().enumerate() {
        let v: usize = q
            .get(&format!("i{d}"))
            .and_then(|s| s.parse().ok())
            .ok_or(ApiError::IndexOutOfRange)?;
        if v >= GRID_SAMPLES {
            return Err(ApiError::IndexOutOfRange);
        }
        *slot = v;
    }
    Ok(out)
}

async fn get_cell(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Result<Json<Value>, ApiError> {
    let atlas = state.atlas()?;
    let i = grid_query(&q)?;
    let cell = atlas.cell(i).map_err(|_| ApiError::IndexOutOfRange)?;
    Ok(Json(json!({
        "indices": i,
        "tokens": cell.tokens.to_string(),
        "events": events(&cell.tokens),
        "attributes": attribute_json(cell),
        "midi": format!("/midi/{}", cell_name(i)),
    })))
}

async fn get_maps(State(state): State<Arc<AppState>>, UrlPath(pad): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let atlas = state.atlas()?;
    let pad = Pad::parse(&pad).ok_or(ApiError::UnknownPad(pad))?;
    let dims = pad.dims();
    let density = atlas.density(pad).ok_or_else(|| ApiError::Internal("missing density plot".into()))?;
    let mut surfaces = Vec::new();
    for a in dims {
        let map = atlas.surface_map(pad, a).ok_or_else(|| ApiError::Internal("missing surface map".into()))?;
        surfaces.push(json!({ "attribute": ATTRIBUTE_NAMES[a], "values": map.values }));
    }
    Ok(Json(json!({
        "pad": pad.name(),
        "dims": dims,
        "density": density.values,
        "surfaces": surfaces,
        "limits": dims.map(|d| [atlas.limits[d].lo, atlas.limits[d].hi]),
        "samples": dims.map(|d| atlas.samples[d]),
        "dots": dims.map(|d| atlas.base_latent[d]),
    })))
}

fn parse_cell_name(name: &str) -> Option<[usize; REGULARISED_DIMS]> {
    let stem = name.strip_suffix(".mid").unwrap_or(name);
    let parts: Vec<usize> = stem.split('_').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let i: [usize; REGULARISED_DIMS] = parts.try_into().ok()?;
    cell_index(i).ok().map(|_| i)
}

async fn get_midi(State(state): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> Result<Response, ApiError> {
    let atlas = state.atlas()?;
    let i = parse_cell_name(&name).ok_or(ApiError::UnknownCell(name))?;
    let cell = atlas.cell(i).map_err(|_| ApiError::IndexOutOfRange)?;
    let bytes = to_midi(&cell.tokens, MIDI_TEMPO_BPM);
    Ok(([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response())
}

async fn get_health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let loaded = state.model.read().expect("model lock").is_some();
    let (atlas, progress) = state.atlas_status();
    Json(json!({
        "status": if loaded { "ready" } else { "loading" },
        "atlas": atlas,
        "progress": progress,
    }))
}

async fn get_model_info(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let model = state.model()?;
    let ck = &model.checkpoint;
    let scores = model.interpretability.as_ref().map(|r| {
        json!({
            "assigned": r.assigned,
            "best": r.best,
            "best_dim": r.best_dim,
        })
    });
    Ok(Json(json!({
        "checkpoint_hash": model.hash,
        "lsr_enabled": ck.lsr_enabled(),
        "epochs": ck.epochs_done,
        "parameter_count": ck.params.parameter_count(),
        "config": ck.params.config,
        "attributes": ATTRIBUTE_NAMES,
        "interpretability": scores,
        "limits": model.stats.limits().map(|l| [l.lo, l.hi]),
    })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/input", post(post_input))
        .route("/cell", get(get_cell))
        .route("/maps/{pad}", get(get_maps))
        .route("/midi/{cell}", get(get_midi))
        .route("/health", get(get_health))
        .route("/model-info", get(get_model_info))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub checkpoint: PathBuf,
    pub corpus: Option<PathBuf>,
    pub addr: SocketAddr,
    pub options: ServiceOptions,
}

/// Binds, starts loading the checkpoint in the background and serves until the
/// listener fails. `on_bound` receives the actual address (useful with port 0).
pub async fn serve(config: ServeConfig, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    on_bound(listener.local_addr()?);
    let state = AppState::new(config.options.clone());
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match LoadedModel::load(&config.checkpoint, config.corpus.as_deref()) {
        Ok(m) => {
            log::info!("model {} loaded", &m.hash[..16]);
            loader.install_model(m);
        }
        Err(e) => log::error!("{e}"),
    });
    axum::serve(listener, router(state)).await
}

/// Names accepted by `GET /maps/{pad}`, with the attribute names each returns.
pub fn pad_attributes(pad: Pad) -> [&'static str; 2] {
    pad.dims().map(|a| ATTRIBUTE_NAMES[a])
}

#![allow(dead_code)]

pub mod schema;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lsrvae::checkpoint::{sha256_hex, Checkpoint};
use lsrvae::corpus::synthetic_corpus;
use lsrvae::model::{ModelConfig, ModelParams};
use lsrvae::training::TrainConfig;
use lsrvae::{Checkpoint64, MetricalWeightProfile, Vocabulary};
use lsrvae_service::{router, AppState, LoadedModel, ServiceOptions};
use serde_json::Value;

/// A small untrained checkpoint; decoding its atlas takes a second or two.
pub fn small_checkpoint(lsr_enabled: bool) -> Checkpoint64 {
    Checkpoint {
        params: ModelParams::init(ModelConfig { seed: 3, ..ModelConfig::with_hidden(12) }).unwrap(),
        profile: MetricalWeightProfile::default(),
        train_config: TrainConfig { lsr_enabled, ..TrainConfig::default() },
        epochs_done: 0,
        history: Vec::new(),
        adam: None,
    }
}

pub fn loaded(ck: Checkpoint64) -> LoadedModel {
    let hash = sha256_hex(&ck.to_bytes());
    let corpus = synthetic_corpus(100, 1, &Vocabulary::default());
    LoadedModel::new(ck, hash, &corpus).unwrap()
}

pub struct Server {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    pub client: reqwest::Client,
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not json ({e}): {:?}", String::from_utf8_lossy(&self.body)))
    }
}

impl Server {
    pub async fn start(model: Option<LoadedModel>, options: ServiceOptions) -> Self {
        let state = AppState::new(options);
        if let Some(m) = model {
            state.install_model(m);
        }
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let app = router(state.clone());
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self { addr, state, client: reqwest::Client::new() }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub async fn get(&self, path: &str) -> Reply {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        Self::reply(r).await
    }

    pub async fn post(&self, path: &str, content_type: &str, body: Vec<u8>) -> Reply {
        let r = self
            .client
            .post(self.url(path))
            .header("content-type", content_type)
            .body(body)
            .send()
            .await
            .unwrap();
        Self::reply(r).await
    }

    async fn reply(r: reqwest::Response) -> Reply {
        let status = r.status().as_u16();
        let content_type = r
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        Reply { status, content_type, body: r.bytes().await.unwrap().to_vec() }
    }

    /// Posts `text` until the atlas is ready, returning the final 200 reply and
    /// every 503 body seen on the way.
    pub async fn post_until_ready(&self, text: &str) -> (Reply, Vec<Value>) {
        let deadline = Instant::now() + Duration::from_secs(300);
        let mut pending = Vec::new();
        loop {
            let r = self.post("/input", "text/plain", text.as_bytes().to_vec()).await;
            if r.status != 503 {
                return (r, pending);
            }
            pending.push(r.json());
            assert!(Instant::now() < deadline, "atlas build did not finish");
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
}

mod common;

use std::time::Instant;

use common::schema::Schema;
use common::{loaded, small_checkpoint, Server};
use lsrvae::midi::{from_midi, to_midi};
use lsrvae::{attributes, Measure, MetricalWeightProfile};
use lsrvae_service::ServiceOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const INPUT: &str = "C4 _ _ _ _ _ E4 _ _ G4 _ _ C5 _ _ _ _ _ R _ _ A4 _ _";
const ALL_RESTS: &str = "R R R R R R R R R R R R R R R R R R R R R R R R";

fn assert_valid(schema: &Schema, def: &str, v: &Value) {
    let errors = schema.check(def, v);
    assert!(errors.is_empty(), "{def}: {errors:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_before_model_load() {
    let schema = Schema::load();
    let server = Server::start(None, ServiceOptions::default()).await;
    let r = server.get("/health").await;
    assert_eq!(r.status, 200);
    assert_eq!(r.json()["status"], "loading");
    assert_valid(&schema, "health", &r.json());

    let r = server.get("/model-info").await;
    assert_eq!(r.status, 503);
    assert_eq!(r.json()["error"], "Loading");
    assert_valid(&schema, "error", &r.json());

    let r = server.post("/input", "text/plain", INPUT.into()).await;
    assert_eq!(r.status, 503);

    let r = server.get("/cell?i0=0&i1=0&i2=0&i3=0").await;
    assert_eq!(r.status, 404);
    assert_eq!(r.json()["error"], "NoAtlas");

    server.state.install_model(loaded(small_checkpoint(true)));
    assert_eq!(server.get("/health").await.json()["status"], "ready");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_follow_the_contract() {
    let schema = Schema::load();
    let server = Server::start(Some(loaded(small_checkpoint(true))), ServiceOptions::default()).await;

    for path in ["/maps/left", "/midi/0_0_0_0", "/cell?i0=0&i1=0&i2=0&i3=0"] {
        let r = server.get(path).await;
        assert_eq!(r.status, 404, "{path}");
        assert_eq!(r.json()["error"], "NoAtlas");
    }

    let first = server.post("/input", "text/plain", INPUT.into()).await;
    assert_eq!(first.status, 503);
    let body = first.json();
    assert_eq!(body["error"], "AtlasBuilding");
    assert_valid(&schema, "error", &body);
    let (ready, pending) = server.post_until_ready(INPUT).await;
    assert_eq!(ready.status, 200);
    for p in &pending {
        let f = p["progress"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    let input = ready.json();
    assert_valid(&schema, "input", &input);
    assert_eq!(input["tokens"], INPUT);
    assert_eq!(input["events"][0], serde_json::json!({"onset_slot": 0, "pitch": 60, "duration_slots": 6}));
    let again = server.post("/input", "text/plain", INPUT.into()).await;
    assert_eq!(again.body, ready.body, "resubmission must be idempotent");

    let health = server.get("/health").await.json();
    assert_eq!(health["atlas"], "ready");

    let profile = MetricalWeightProfile::default();
    for idx in ["0_0_0_0", "9_9_9_9", "3_1_4_1"] {
        let i: Vec<&str> = idx.split('_').collect();
        let r = server.get(&format!("/cell?i0={}&i1={}&i2={}&i3={}", i[0], i[1], i[2], i[3])).await;
        assert_eq!(r.status, 200);
        let cell = r.json();
        assert_valid(&schema, "cell", &cell);
        let m: Measure = cell["tokens"].as_str().unwrap().parse().unwrap();
        let a = attributes(&m, &profile);
        assert_eq!(cell["attributes"]["note_range"], a.note_range);
        assert_eq!(cell["attributes"]["note_density"], a.note_density);
        assert_eq!(cell["attributes"]["rhythmic_complexity"].as_f64().unwrap(), a.rhythmic_complexity);
        assert_eq!(cell["attributes"]["avg_interval_jump"].as_f64().unwrap(), a.avg_interval_jump);
        assert_eq!(cell["midi"], format!("/midi/{idx}"));

        let midi = server.get(&format!("/midi/{idx}")).await;
        assert_eq!(midi.status, 200);
        assert_eq!(midi.content_type, "audio/midi");
        assert_eq!(from_midi(&midi.body).unwrap(), m);
    }

    for bad in ["/cell?i0=10&i1=0&i2=0&i3=0", "/cell?i0=0&i1=0&i2=0", "/cell?i0=x&i1=0&i2=0&i3=0"] {
        let r = server.get(bad).await;
        assert_eq!(r.status, 422, "{bad}");
        assert_eq!(r.json()["error"], "IndexOutOfRange");
        assert_valid(&schema, "error", &r.json());
    }
    for bad in ["/midi/10_0_0_0", "/midi/nope", "/midi/1_2_3"] {
        let r = server.get(bad).await;
        assert_eq!(r.status, 404, "{bad}");
        assert_eq!(r.json()["error"], "UnknownCell");
    }

    for (pad, names) in [("left", ["rhythmic_complexity", "note_range"]), ("right", ["note_density", "avg_interval_jump"])] {
        let r = server.get(&format!("/maps/{pad}")).await;
        assert_eq!(r.status, 200);
        let maps = r.json();
        assert_valid(&schema, "maps", &maps);
        assert_eq!(maps["surfaces"][0]["attribute"], names[0]);
        assert_eq!(maps["surfaces"][1]["attribute"], names[1]);
        assert_eq!(maps["density"].as_array().unwrap().len(), 32);
    }
    let r = server.get("/maps/up").await;
    assert_eq!(r.status, 422);
    assert_eq!(r.json()["error"], "UnknownPad");

    let info = server.get("/model-info").await;
    assert_eq!(info.status, 200);
    assert_valid(&schema, "model_info", &info.json());
    assert_eq!(info.json()["lsr_enabled"], true);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn input_errors_and_midi_upload() {
    let schema = Schema::load();
    let server = Server::start(Some(loaded(small_checkpoint(false))), ServiceOptions::default()).await;
    assert_eq!(server.get("/model-info").await.json()["lsr_enabled"], false);

    let short = INPUT.rsplit_once(' ').unwrap().0;
    let r = server.post("/input", "text/plain", short.into()).await;
    assert_eq!(r.status, 400);
    assert_eq!(r.json()["error"], "WrongTokenCount");
    assert_valid(&schema, "error", &r.json());

    let r = server.post("/input", "text/plain", "C4 ? _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _ _".into()).await;
    assert_eq!(r.status, 400);
    assert_eq!(r.json()["error"], "UnknownToken");

    // Two notes sounding together.
    let mut track = vec![0x00, 0x90, 60, 100, 0x00, 0x90, 64, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0x80, 64, 0, 0x00, 0xFF, 0x2F, 0x00];
    let mut chord = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0MTrk".to_vec();
    chord.extend_from_slice(&(track.len() as u32).to_be_bytes());
    chord.append(&mut track);
    let r = server.post("/input", "audio/midi", chord).await;
    assert_eq!(r.status, 400);
    assert_eq!(r.json()["error"], "Polyphonic");

    let rests: Measure = ALL_RESTS.parse().unwrap();
    let (r, _) = server.post_until_ready(ALL_RESTS).await;
    assert_eq!(r.status, 200);
    let via_midi = server.post("/input", "audio/midi", to_midi(&rests, 120.0)).await;
    assert_eq!(via_midi.status, 200);
    assert_eq!(via_midi.body, r.body);
    let body = r.json();
    assert!(body["dots"].as_array().unwrap().iter().all(|d| d.as_f64().unwrap().is_finite()));
    assert_eq!(body["events"].as_array().unwrap().len(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn atlas_cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let options = ServiceOptions { atlas_cache_dir: Some(dir.path().to_path_buf()) };
    let first = Server::start(Some(loaded(small_checkpoint(true))), options.clone()).await;
    let (a, _) = first.post_until_ready(INPUT).await;
    let cell_a = first.get("/cell?i0=2&i1=7&i2=1&i3=8").await;
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

    let second = Server::start(Some(loaded(small_checkpoint(true))), options).await;
    let b = second.post("/input", "text/plain", INPUT.into()).await;
    assert_eq!(b.status, 200, "cached atlas should be served at once");
    assert_eq!(b.body, a.body);
    assert_eq!(second.get("/cell?i0=2&i1=7&i2=1&i3=8").await.body, cell_a.body);
}

fn random_paths(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let i: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..10));
            match rng.random_range(0..10) {
                0 => "/maps/left".to_string(),
                1 => "/maps/right".to_string(),
                2 => format!("/midi/{}_{}_{}_{}", i[0], i[1], i[2], i[3]),
                3 => "/model-info".to_string(),
                4 => format!("/cell?i0={}&i1=11&i2=0&i3=0", i[0]),
                _ => format!("/cell?i0={}&i1={}&i2={}&i3={}", i[0], i[1], i[2], i[3]),
            }
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_match_serial() {
    let server = Server::start(Some(loaded(small_checkpoint(true))), ServiceOptions::default()).await;
    server.post_until_ready(INPUT).await;
    let paths = random_paths(200, 5);
    let mut serial = Vec::new();
    for p in &paths {
        let r = server.get(p).await;
        serial.push((r.status, r.body));
    }
    let client = server.client.clone();
    let handles: Vec<_> = paths
        .iter()
        .map(|p| {
            let client = client.clone();
            let url = server.url(p);
            tokio::spawn(async move {
                let r = client.get(url).send().await.unwrap();
                (r.status().as_u16(), r.bytes().await.unwrap().to_vec())
            })
        })
        .collect();
    for (k, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[k], "request {k}: {}", paths[k]);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cell_lookups_are_fast() {
    let server = Server::start(Some(loaded(small_checkpoint(true))), ServiceOptions::default()).await;
    server.post_until_ready(INPUT).await;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut times = Vec::new();
    for _ in 0..1000 {
        let i: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..10));
        let t = Instant::now();
        let r = server.get(&format!("/cell?i0={}&i1={}&i2={}&i3={}", i[0], i[1], i[2], i[3])).await;
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(r.status, 200);
    }
    times.sort_by(f64::total_cmp);
    assert!(times[500] < 0.05, "median {}", times[500]);
}

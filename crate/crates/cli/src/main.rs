//! `lsrvae`: prepare corpora, train, evaluate, precompute atlases and serve.
//!
//! Exit codes: 0 success, 1 user error (bad input, flags or files), 2 internal error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use lsrvae::atlas::{build_atlas, export_atlas, interpretability, monotonicity, AtlasError, LatentStats};
use lsrvae::checkpoint::{file_hash, sha256_hex, write_atomic, Checkpoint};
use lsrvae::corpus::{format_corpus, load_corpus, synthetic_corpus, AttributeCache, CorpusError};
use lsrvae::midi::from_midi;
use lsrvae::model::ModelConfig;
use lsrvae::training::{train_from, TrainConfig, TrainError, TrainState};
use lsrvae::attributes::ATTRIBUTE_NAMES;
use lsrvae::{Checkpoint64, Measure, MetricalWeightProfile, Vocabulary};
use lsrvae_service::{serve, ServeConfig, ServiceOptions};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const ATTRIBUTE_FILE: &str = "attributes.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "lsrvae", version, about = "Measure VAE with attribute-regularised latent dims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file or generate a synthetic one, and cache its attributes.
    Prepare(PrepareArgs),
    /// Train a model; writes a checkpoint after every epoch.
    Train(TrainArgs),
    /// Reconstruction accuracy, interpretability and monotonicity of a checkpoint.
    Eval(EvalArgs),
    /// Precompute and export the latent atlas for one input measure.
    Atlas(AtlasArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// One-measure-per-line corpus to validate.
    #[arg(long, env = "LSRVAE_INPUT", conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate this many random measures instead.
    #[arg(long, env = "LSRVAE_SYNTHETIC")]
    synthetic: Option<usize>,
    #[arg(long, env = "LSRVAE_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory for corpus.txt, attributes.json and the run manifest.
    #[arg(long, env = "LSRVAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "LSRVAE_CORPUS")]
    corpus: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long, env = "LSRVAE_CONFIG")]
    config: Option<PathBuf>,
    /// Train the baseline without latent regularisation.
    #[arg(long, env = "LSRVAE_NO_LSR")]
    no_lsr: bool,
    #[arg(long, env = "LSRVAE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "LSRVAE_SEED")]
    seed: Option<u64>,
    /// Continue from the checkpoint in `--out` if there is one.
    #[arg(long, env = "LSRVAE_RESUME")]
    resume: bool,
    #[arg(long, env = "LSRVAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "LSRVAE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "LSRVAE_CORPUS")]
    corpus: PathBuf,
    /// Where to write the JSON report (default: next to the checkpoint).
    #[arg(long, env = "LSRVAE_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AtlasArgs {
    #[arg(long, env = "LSRVAE_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Input measure as tokens, or a path to a MIDI or text file.
    #[arg(long, env = "LSRVAE_INPUT")]
    input: String,
    /// Corpus whose latents set the sampling limits.
    #[arg(long, env = "LSRVAE_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "LSRVAE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "LSRVAE_CHECKPOINT", required_unless_present = "no_lsr")]
    checkpoint: Option<PathBuf>,
    /// Checkpoint of the non-regularised model, used with `--no-lsr`.
    #[arg(long, env = "LSRVAE_BASELINE_CHECKPOINT")]
    baseline_checkpoint: Option<PathBuf>,
    #[arg(long, env = "LSRVAE_NO_LSR")]
    no_lsr: bool,
    #[arg(long, env = "LSRVAE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "LSRVAE_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "LSRVAE_ATLAS_CACHE_DIR")]
    atlas_cache_dir: Option<PathBuf>,
    /// Corpus whose latents set the sampling limits.
    #[arg(long, env = "LSRVAE_CORPUS")]
    corpus: Option<PathBuf>,
}

/// Marks errors caused by the caller (exit code 1).
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Written next to every run's outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    config: Value,
    seed: Option<u64>,
    hashes: BTreeMap<String, String>,
    timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    fn new(subcommand: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed,
            hashes: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn hash_file(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        self.hashes.insert(name.into(), file_hash(path)?);
        Ok(())
    }

    fn time(&mut self, name: &str, since: Instant) {
        self.timings_ms.insert(name.into(), since.elapsed().as_millis() as u64);
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(format!("run-{}.json", self.subcommand));
        write_atomic(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_corpus(path: &Path, vocab: &Vocabulary) -> anyhow::Result<Vec<Measure>> {
    match load_corpus(path, vocab) {
        Ok(c) => Ok(c),
        Err(CorpusError::InvalidLines(lines)) => {
            let report: Vec<String> = lines.iter().map(|l| format!("  {}: {}", path.display(), l)).collect();
            Err(user(format!("{} invalid line(s):\n{}", lines.len(), report.join("\n"))))
        }
        Err(e) => Err(user(format!("{}: {e}", path.display()))),
    }
}

fn read_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint64, String)> {
    let bytes = fs::read(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint64::from_bytes(&bytes).map_err(|e| user(format!("{}: {e}", path.display())))?;
    Ok((ck, sha256_hex(&bytes)))
}

fn prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let vocab = Vocabulary::default();
    let corpus = match (&args.input, args.synthetic) {
        (Some(path), None) => read_corpus(path, &vocab)?,
        (None, Some(n)) if n > 0 => synthetic_corpus(n, args.seed, &vocab),
        (None, Some(_)) => return Err(user("--synthetic needs a positive count")),
        _ => return Err(user("give either --input FILE or --synthetic N")),
    };
    fs::create_dir_all(&args.out)?;
    let corpus_path = args.out.join(CORPUS_FILE);
    let cache_path = args.out.join(ATTRIBUTE_FILE);
    write_atomic(&corpus_path, format_corpus(&corpus).as_bytes())?;
    let cache = AttributeCache::compute(&corpus, &MetricalWeightProfile::default());
    write_atomic(&cache_path, &serde_json::to_vec(&cache)?)?;
    log::info!("prepared {} measures in {}", corpus.len(), args.out.display());

    let config = json!({ "input": args.input, "synthetic": args.synthetic, "out": args.out });
    let mut manifest = RunManifest::new("prepare", config, Some(args.seed));
    manifest.hash_file("corpus", &corpus_path)?;
    manifest.hash_file("attributes", &cache_path)?;
    manifest.time("total", started);
    manifest.write(&args.out)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut config: RunConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| user(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if args.no_lsr {
        config.train.lsr_enabled = false;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
        config.model.seed = s;
    }
    config.model.validate().map_err(|e| user(e.to_string()))?;
    config.train.validate().map_err(|e| user(e.to_string()))?;
    let corpus = read_corpus(&args.corpus, &config.model.vocabulary)?;
    let profile = MetricalWeightProfile::default();

    fs::create_dir_all(&args.out)?;
    let ck_path = args.out.join(CHECKPOINT_FILE);
    let metrics_path = args.out.join(METRICS_FILE);
    let mut state = if args.resume && ck_path.exists() {
        let (ck, _) = read_checkpoint(&ck_path)?;
        if ck.params.config != config.model {
            return Err(user("checkpoint model configuration differs from the requested one"));
        }
        let adam = ck.adam.ok_or_else(|| user("checkpoint has no optimiser state to resume from"))?;
        log::info!("resuming after epoch {}", ck.epochs_done);
        TrainState { params: ck.params, adam, epochs_done: ck.epochs_done, history: ck.history }
    } else {
        let _ = fs::remove_file(&metrics_path);
        TrainState::fresh(config.model.clone()).map_err(|e| user(e.to_string()))?
    };
    // Keep the metrics log consistent with the checkpoint we resume from.
    let mut log_text = String::new();
    for r in &state.history {
        log_text.push_str(&serde_json::to_string(r)?);
        log_text.push('\n');
    }
    write_atomic(&metrics_path, log_text.as_bytes())?;

    let train_config = config.train.clone();
    train_from(&mut state, &corpus, &profile, &train_config, |s, record| {
        let ck = Checkpoint {
            params: s.params.clone(),
            profile,
            train_config: train_config.clone(),
            epochs_done: s.epochs_done,
            history: s.history.clone(),
            adam: Some(s.adam.clone()),
        };
        ck.save(&ck_path).map_err(|e| TrainError::Callback(e.to_string()))?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| TrainError::Callback(e.to_string()))?;
        writeln!(f, "{}", serde_json::to_string(record).expect("record serialises"))
            .map_err(|e| TrainError::Callback(e.to_string()))?;
        Ok(())
    })?;
    let accuracy = state.params.reconstruction_accuracy(&corpus)?;
    println!("trained {} epochs; reconstruction accuracy {accuracy:.4}", state.epochs_done);

    let mut manifest = RunManifest::new("train", serde_json::to_value(&config)?, Some(config.train.seed));
    manifest.hash_file("corpus", &args.corpus)?;
    manifest.hash_file("checkpoint", &ck_path)?;
    manifest.time("total", started);
    manifest.write(&args.out)
}

#[derive(Debug, Serialize)]
struct Interpretability {
    assigned: [f64; 4],
    best: [f64; 4],
    best_dim: [usize; 4],
    /// Rows are latent dims, columns attributes.
    table: Vec<[f64; 4]>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    checkpoint_hash: String,
    lsr_enabled: bool,
    corpus_size: usize,
    reconstruction_accuracy: f64,
    attributes: [&'static str; 4],
    /// Absent when the corpus is too small to fit.
    interpretability: Option<Interpretability>,
    monotonicity: Option<[f64; 4]>,
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (ck, hash) = read_checkpoint(&args.checkpoint)?;
    let vocab = *ck.params.vocabulary();
    let corpus = match load_corpus(&args.corpus, &vocab) {
        Err(CorpusError::InvalidLines(lines)) if lines.iter().any(|l| l.kind == "PitchOutOfVocab") => {
            return Err(user(format!(
                "MismatchedVocabulary: corpus has pitches outside the checkpoint's range (first: {})",
                lines[0]
            )))
        }
        _ => read_corpus(&args.corpus, &vocab)?,
    };
    let p = &ck.params;
    let accuracy = p.reconstruction_accuracy(&corpus)?;
    let interp = match interpretability(p, &corpus, &ck.profile) {
        Ok(r) => Some(Interpretability { assigned: r.assigned, best: r.best, best_dim: r.best_dim, table: r.table }),
        Err(AtlasError::TooFewSamples(n)) => {
            log::warn!("{n} measures are too few for interpretability scores");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let mono = if corpus.len() >= 2 {
        let stats = LatentStats::from_corpus(p, &corpus)?;
        Some(monotonicity(&build_atlas(&corpus[0], p, &stats, &ck.profile, &hash, &|_| {})?))
    } else {
        None
    };
    let report = EvalReport {
        checkpoint_hash: hash,
        lsr_enabled: ck.lsr_enabled(),
        corpus_size: corpus.len(),
        reconstruction_accuracy: accuracy,
        attributes: ATTRIBUTE_NAMES,
        interpretability: interp,
        monotonicity: mono,
    };

    println!("reconstruction accuracy  {:.4}", report.reconstruction_accuracy);
    if let Some(i) = &report.interpretability {
        println!("{:<22} {:>9} {:>9} {:>6} {:>13}", "attribute", "assigned", "best", "dim", "monotonicity");
        for a in 0..4 {
            let m = report.monotonicity.map_or(f64::NAN, |m| m[a]);
            println!(
                "{:<22} {:>9.4} {:>9.4} {:>6} {:>13.4}",
                ATTRIBUTE_NAMES[a], i.assigned[a], i.best[a], i.best_dim[a], m
            );
        }
    }
    let report_path = args.report.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval-report.json")
    });
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;

    let config = json!({ "checkpoint": args.checkpoint, "corpus": args.corpus, "report": report_path });
    let mut manifest = RunManifest::new("eval", config, None);
    manifest.hashes.insert("checkpoint".into(), report.checkpoint_hash.clone());
    manifest.hash_file("corpus", &args.corpus)?;
    manifest.hash_file("report", &report_path)?;
    manifest.time("total", started);
    manifest.write(report_path.parent().unwrap_or(Path::new(".")))
}

fn read_input_measure(input: &str, vocab: &Vocabulary) -> anyhow::Result<Measure> {
    let path = Path::new(input);
    let measure = if path.is_file() {
        let bytes = fs::read(path)?;
        if bytes.starts_with(b"MThd") {
            from_midi(&bytes).map_err(|e| user(format!("{input}: {e}")))?
        } else {
            let text = String::from_utf8(bytes).map_err(|_| user(format!("{input}: not MIDI or text")))?;
            Measure::parse_with(text.trim(), vocab).map_err(|e| user(format!("{input}: {e}")))?
        }
    } else {
        Measure::parse_with(input, vocab).map_err(|e| user(format!("input measure: {e}")))?
    };
    for p in measure.pitches() {
        vocab.check_pitch(p).map_err(|e| user(e.to_string()))?;
    }
    Ok(measure)
}

fn atlas(args: AtlasArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (ck, hash) = read_checkpoint(&args.checkpoint)?;
    let vocab = *ck.params.vocabulary();
    let input = read_input_measure(&args.input, &vocab)?;
    let corpus = read_corpus(&args.corpus, &vocab)?;
    let stats = LatentStats::from_corpus(&ck.params, &corpus)?;
    let atlas = build_atlas(&input, &ck.params, &stats, &ck.profile, &hash, &|f| log::debug!("atlas {:.0}%", f * 100.0))?;
    export_atlas(&atlas, &args.out)?;
    println!("atlas for {input} written to {}", args.out.display());

    let config = json!({ "checkpoint": args.checkpoint, "input": input.to_string(), "corpus": args.corpus, "out": args.out });
    let mut manifest = RunManifest::new("atlas", config, None);
    manifest.hashes.insert("checkpoint".into(), hash);
    manifest.hashes.insert("atlas".into(), atlas.content_hash());
    manifest.hash_file("corpus", &args.corpus)?;
    manifest.time("total", started);
    manifest.write(&args.out)
}

fn serve_cmd(args: ServeArgs) -> anyhow::Result<()> {
    let checkpoint = if args.no_lsr {
        args.baseline_checkpoint.clone().ok_or_else(|| user("--no-lsr needs --baseline-checkpoint"))?
    } else {
        args.checkpoint.clone().ok_or_else(|| user("--checkpoint is required"))?
    };
    if !checkpoint.is_file() {
        return Err(user(format!("UntrainedModel: checkpoint {} not found", checkpoint.display())));
    }
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| user(format!("bad address: {e}")))?;
    let config = ServeConfig {
        checkpoint,
        corpus: args.corpus.clone(),
        addr,
        options: ServiceOptions { atlas_cache_dir: args.atlas_cache_dir.clone() },
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(config, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Atlas(a) => atlas(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UserError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

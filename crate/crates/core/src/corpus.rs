//! Measure corpora: the one-measure-per-line text format and a seeded synthetic generator.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{attributes, AttributeVector, MetricalWeightProfile};
use crate::score::{Measure, NoteEvent, Vocabulary, SLOTS};

/// One rejected corpus line (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub kind: String,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("{} invalid line(s); first: {}", .0.len(), .0[0])]
    InvalidLines(Vec<LineError>),
    #[error("corpus is empty")]
    Empty,
}

/// Parses a corpus, one measure per line. Blank lines and `#` comments are skipped.
/// Every invalid line is reported, not just the first.
pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<Measure>, CorpusError> {
    let mut measures = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match Measure::parse_with(trimmed, vocab) {
            Ok(m) => measures.push(m),
            Err(e) => errors.push(LineError { line: i + 1, kind: e.kind().to_string(), message: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(CorpusError::InvalidLines(errors));
    }
    if measures.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(measures)
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Measure>, CorpusError> {
    parse_corpus(&std::fs::read_to_string(path)?, vocab)
}

pub fn format_corpus(measures: &[Measure]) -> String {
    let mut out = String::new();
    for m in measures {
        out.push_str(&m.to_string());
        out.push('\n');
    }
    out
}

/// Attribute vectors computed once per corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCache {
    pub profile: MetricalWeightProfile,
    pub entries: Vec<AttributeVector>,
}

impl AttributeCache {
    pub fn compute(corpus: &[Measure], profile: &MetricalWeightProfile) -> Self {
        Self { profile: *profile, entries: corpus.iter().map(|m| attributes(m, profile)).collect() }
    }

    pub fn arrays(&self) -> Vec<[f64; 4]> {
        self.entries.iter().map(AttributeVector::as_array).collect()
    }
}

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

/// `n` random rest-canonical measures from `seed`.
///
/// Each measure draws its own note count (1 to 12), a metrical bias that ranges
/// from strongly on-beat to strongly syncopated, and a C-major random walk whose
/// maximum step varies from one to five scale degrees, so all four attributes
/// spread widely across the corpus.
pub fn synthetic_corpus(n: usize, seed: u64, vocab: &Vocabulary) -> Vec<Measure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<u8> = (vocab.pitch_lo()..=vocab.pitch_hi())
        .filter(|p| MAJOR_SCALE.contains(&(p % 12)))
        .collect();
    let profile = MetricalWeightProfile::default();
    (0..n).map(|_| synthetic_measure(&mut rng, &scale, &profile)).collect()
}

fn synthetic_measure(rng: &mut ChaCha8Rng, scale: &[u8], profile: &MetricalWeightProfile) -> Measure {
    let count = rng.random_range(1..=12usize);
    let bias: f64 = rng.random_range(-2.0..3.0);
    let mut weights: Vec<f64> = profile.weights().iter().map(|w| (*w as f64).powf(bias)).collect();
    let mut onsets = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut slot = 0;
        while slot < SLOTS - 1 && (weights[slot] == 0.0 || pick >= weights[slot]) {
            pick -= weights[slot];
            slot += 1;
        }
        onsets.push(slot);
        weights[slot] = 0.0;
    }
    onsets.sort_unstable();

    let max_step = rng.random_range(1..=5i32);
    let last = scale.len() as i32 - 1;
    let mut degree = rng.random_range(last / 4..=3 * last / 4);
    let mut events = Vec::with_capacity(count);
    for (k, &onset) in onsets.iter().enumerate() {
        if k > 0 {
            degree = (degree + rng.random_range(-max_step..=max_step)).clamp(0, last);
        }
        let room = onsets.get(k + 1).copied().unwrap_or(SLOTS) - onset;
        let duration = if room > 1 && rng.random_bool(0.25) { rng.random_range(1..room) } else { room };
        events.push(NoteEvent { onset_slot: onset as u8, pitch: scale[degree as usize], duration_slots: duration as u8 });
    }
    Measure::from_events(&events).expect("generated events fit the bar")
}

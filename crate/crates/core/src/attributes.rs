//! The four musical attributes tied to latent dims 0..4.
//!
//! Rhythmic complexity follows Toussaint's metrical complexity: the metricity
//! of the best possible placement of the measure's onsets minus the metricity
//! of the actual onsets, under a 24-slot metrical weight profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{Measure, SLOTS};

/// Number of regularised attributes.
pub const ATTRIBUTE_COUNT: usize = 4;

/// Display names, in latent-dim order.
pub const ATTRIBUTE_NAMES: [&str; ATTRIBUTE_COUNT] =
    ["rhythmic_complexity", "note_range", "note_density", "avg_interval_jump"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("metrical weights must be positive")]
    NonPositive,
    #[error("slot 0 must hold the unique maximum weight")]
    DownbeatNotMaximal,
    #[error("beat-start weights must exceed every off-beat weight")]
    BeatsNotDominant,
}

/// One positive weight per slot; heavier slots are metrically stronger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct MetricalWeightProfile {
    weights: [u32; SLOTS],
}

impl Default for MetricalWeightProfile {
    fn default() -> Self {
        let mut weights = [1u32; SLOTS];
        for slot in [3, 9, 15, 21] {
            weights[slot] = 2;
        }
        weights[6] = 3;
        weights[18] = 3;
        weights[12] = 4;
        weights[0] = 5;
        Self { weights }
    }
}

impl MetricalWeightProfile {
    pub fn new(weights: [u32; SLOTS]) -> Result<Self, ProfileError> {
        if weights.contains(&0) {
            return Err(ProfileError::NonPositive);
        }
        if weights[1..].iter().any(|w| *w >= weights[0]) {
            return Err(ProfileError::DownbeatNotMaximal);
        }
        let min_beat = [0, 6, 12, 18].iter().map(|s| weights[*s]).min().unwrap_or(0);
        let max_off = (0..SLOTS).filter(|s| s % 6 != 0).map(|s| weights[s]).max().unwrap_or(0);
        if min_beat <= max_off {
            return Err(ProfileError::BeatsNotDominant);
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[u32; SLOTS] {
        &self.weights
    }

    pub fn metricity(&self, onsets: impl IntoIterator<Item = usize>) -> u32 {
        onsets.into_iter().map(|s| self.weights[s]).sum()
    }

    /// Highest metricity any `n` distinct slots can reach.
    pub fn max_metricity(&self, n: usize) -> u32 {
        let mut sorted = self.weights;
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.iter().take(n).sum()
    }

    /// The `n` heaviest slots, lowest index first among equal weights.
    pub fn best_placement(&self, n: usize) -> Vec<usize> {
        let mut slots: Vec<usize> = (0..SLOTS).collect();
        slots.sort_by(|a, b| self.weights[*b].cmp(&self.weights[*a]).then(a.cmp(b)));
        slots.truncate(n);
        slots.sort_unstable();
        slots
    }
}

impl TryFrom<Vec<u32>> for MetricalWeightProfile {
    type Error = String;

    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        let weights: [u32; SLOTS] =
            v.try_into().map_err(|v: Vec<u32>| format!("expected {SLOTS} weights, got {}", v.len()))?;
        Self::new(weights).map_err(|e| e.to_string())
    }
}

impl From<MetricalWeightProfile> for Vec<u32> {
    fn from(p: MetricalWeightProfile) -> Self {
        p.weights.to_vec()
    }
}

/// Attribute values of one measure, in latent-dim order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeVector {
    pub rhythmic_complexity: f64,
    pub note_range: u32,
    pub note_density: u32,
    pub avg_interval_jump: f64,
}

impl AttributeVector {
    pub fn as_array(&self) -> [f64; ATTRIBUTE_COUNT] {
        [
            self.rhythmic_complexity,
            self.note_range as f64,
            self.note_density as f64,
            self.avg_interval_jump,
        ]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.as_array()[index]
    }
}

pub fn rhythmic_complexity(measure: &Measure, profile: &MetricalWeightProfile) -> f64 {
    let onsets: Vec<usize> = measure.events().iter().map(|e| e.onset_slot as usize).collect();
    if onsets.is_empty() {
        return 0.0;
    }
    let best = profile.max_metricity(onsets.len());
    let actual = profile.metricity(onsets);
    (best - actual) as f64
}

pub fn note_range(measure: &Measure) -> u32 {
    let mut pitches = measure.pitches();
    let Some(first) = pitches.next() else { return 0 };
    let (lo, hi) = pitches.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p)));
    (hi - lo) as u32
}

pub fn note_density(measure: &Measure) -> u32 {
    measure.note_count() as u32
}

pub fn avg_interval_jump(measure: &Measure) -> f64 {
    let pitches: Vec<i32> = measure.pitches().map(i32::from).collect();
    if pitches.len() < 2 {
        return 0.0;
    }
    let total: i32 = pitches.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    total as f64 / (pitches.len() - 1) as f64
}

pub fn attributes(measure: &Measure, profile: &MetricalWeightProfile) -> AttributeVector {
    AttributeVector {
        rhythmic_complexity: rhythmic_complexity(measure, profile),
        note_range: note_range(measure),
        note_density: note_density(measure),
        avg_interval_jump: avg_interval_jump(measure),
    }
}

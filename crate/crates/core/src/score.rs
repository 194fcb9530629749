//! Measure token representation.
//!
//! A measure is one 4/4 bar split into 24 slots (4 beats of 6 sixteenth-note
//! triplet ticks). Each slot holds a note onset, a continuation of the previous
//! note or rest, or a rest onset. The canonical text form is 24
//! whitespace-separated fields, e.g. `C4 _ _ _ _ _ E4 _ ... R`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slots per measure.
pub const SLOTS: usize = 24;
/// Triplet-sixteenth ticks per beat.
pub const TICKS_PER_BEAT: usize = 6;
/// Beats per measure.
pub const BEATS: usize = 4;

/// Lowest pitch of the default vocabulary (A2).
pub const DEFAULT_PITCH_LO: u8 = 45;
/// Highest pitch of the default vocabulary (G6).
pub const DEFAULT_PITCH_HI: u8 = 91;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("expected {expected} tokens, found {found}")]
    WrongTokenCount { expected: usize, found: usize },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("measure begins with a continuation token")]
    LeadingContinue,
    #[error("pitch {pitch} outside vocabulary range {lo}..={hi}")]
    PitchOutOfVocab { pitch: u8, lo: u8, hi: u8 },
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("invalid vocabulary bounds {lo}..={hi}")]
    InvalidVocabulary { lo: u8, hi: u8 },
}

impl ScoreError {
    /// Stable short name used in reports and HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreError::WrongTokenCount { .. } => "WrongTokenCount",
            ScoreError::UnknownToken(_) => "UnknownToken",
            ScoreError::LeadingContinue => "LeadingContinue",
            ScoreError::PitchOutOfVocab { .. } => "PitchOutOfVocab",
            ScoreError::IdOutOfRange { .. } => "IdOutOfRange",
            ScoreError::InvalidVocabulary { .. } => "InvalidVocabulary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    /// Onset of a note with the given MIDI pitch.
    Note(u8),
    /// The previous note or rest keeps sounding.
    Continue,
    /// Onset of a rest.
    Rest,
}

const NOTE_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// Scientific pitch name with sharps, `60 -> "C4"`.
pub fn pitch_name(pitch: u8) -> String {
    let octave = pitch as i32 / 12 - 1;
    format!("{}{}", NOTE_NAMES[pitch as usize % 12], octave)
}

/// Parses a scientific pitch name (`C4`, `F#3`, `Bb5`, `C-1`) into a MIDI pitch.
pub fn parse_pitch_name(name: &str) -> Option<u8> {
    let mut chars = name.chars();
    let letter = chars.next()?;
    let base: i32 = match letter {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let rest = chars.as_str();
    let (accidental, octave_str) = match rest.chars().next() {
        Some('#') => (1, &rest[1..]),
        Some('b') => (-1, &rest[1..]),
        _ => (0, rest),
    };
    if octave_str.is_empty() {
        return None;
    }
    let octave: i32 = octave_str.parse().ok()?;
    let pitch = (octave + 1) * 12 + base + accidental;
    u8::try_from(pitch).ok().filter(|p| *p <= 127)
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Note(p) => f.write_str(&pitch_name(*p)),
            Token::Continue => f.write_str("_"),
            Token::Rest => f.write_str("R"),
        }
    }
}

impl FromStr for Token {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "_" => Ok(Token::Continue),
            "R" => Ok(Token::Rest),
            other => parse_pitch_name(other)
                .map(Token::Note)
                .ok_or_else(|| ScoreError::UnknownToken(other.to_string())),
        }
    }
}

/// One bar of monophonic music: exactly 24 tokens, never starting with a continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measure {
    tokens: [Token; SLOTS],
}

impl Measure {
    pub fn new(tokens: [Token; SLOTS]) -> Result<Self, ScoreError> {
        if tokens[0] == Token::Continue {
            return Err(ScoreError::LeadingContinue);
        }
        Ok(Self { tokens })
    }

    pub fn from_slice(tokens: &[Token]) -> Result<Self, ScoreError> {
        let arr: [Token; SLOTS] = tokens.try_into().map_err(|_| ScoreError::WrongTokenCount {
            expected: SLOTS,
            found: tokens.len(),
        })?;
        Self::new(arr)
    }

    pub fn rests() -> Self {
        Self { tokens: [Token::Rest; SLOTS] }
    }

    pub fn tokens(&self) -> &[Token; SLOTS] {
        &self.tokens
    }

    pub fn note_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, Token::Note(_))).count()
    }

    /// Pitches of the note onsets in slot order.
    pub fn pitches(&self) -> impl Iterator<Item = u8> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            Token::Note(p) => Some(*p),
            _ => None,
        })
    }

    /// Rewrites rest continuations as explicit rests. MIDI carries no rest
    /// structure, so this is the form a MIDI round trip reproduces.
    pub fn with_canonical_rests(&self) -> Self {
        let mut tokens = self.tokens;
        let mut in_rest = false;
        for t in tokens.iter_mut() {
            match *t {
                Token::Note(_) => in_rest = false,
                Token::Rest => in_rest = true,
                Token::Continue if in_rest => *t = Token::Rest,
                Token::Continue => {}
            }
        }
        Self { tokens }
    }

    /// Shifts every pitch by `semitones`; `None` when a pitch leaves 0..=127.
    pub fn transposed(&self, semitones: i32) -> Option<Self> {
        let mut tokens = self.tokens;
        for t in tokens.iter_mut() {
            if let Token::Note(p) = t {
                let shifted = *p as i32 + semitones;
                *p = u8::try_from(shifted).ok().filter(|p| *p <= 127)?;
            }
        }
        Some(Self { tokens })
    }

    /// Note events in onset order.
    pub fn events(&self) -> Vec<NoteEvent> {
        let mut events: Vec<NoteEvent> = Vec::new();
        let mut sounding = false;
        for (slot, t) in self.tokens.iter().enumerate() {
            match *t {
                Token::Note(pitch) => {
                    events.push(NoteEvent { onset_slot: slot as u8, pitch, duration_slots: 1 });
                    sounding = true;
                }
                Token::Continue if sounding => {
                    if let Some(last) = events.last_mut() {
                        last.duration_slots += 1;
                    }
                }
                Token::Continue => {}
                Token::Rest => sounding = false,
            }
        }
        events
    }

    /// Builds a rest-canonical measure from non-overlapping events.
    pub fn from_events(events: &[NoteEvent]) -> Result<Self, ScoreError> {
        let mut tokens = [Token::Rest; SLOTS];
        for e in events {
            let start = e.onset_slot as usize;
            let end = start + e.duration_slots as usize;
            if e.duration_slots == 0 || end > SLOTS {
                return Err(ScoreError::WrongTokenCount { expected: SLOTS, found: end });
            }
            tokens[start] = Token::Note(e.pitch);
            for slot in tokens.iter_mut().take(end).skip(start + 1) {
                *slot = Token::Continue;
            }
        }
        Self::new(tokens)
    }

    pub fn to_ids(&self, vocab: &Vocabulary) -> Result<[usize; SLOTS], ScoreError> {
        let mut ids = [0usize; SLOTS];
        for (id, t) in ids.iter_mut().zip(self.tokens.iter()) {
            *id = vocab.encode(*t)?;
        }
        Ok(ids)
    }

    pub fn from_ids(ids: &[usize], vocab: &Vocabulary) -> Result<Self, ScoreError> {
        if ids.len() != SLOTS {
            return Err(ScoreError::WrongTokenCount { expected: SLOTS, found: ids.len() });
        }
        let mut tokens = [Token::Rest; SLOTS];
        for (t, &id) in tokens.iter_mut().zip(ids) {
            *t = vocab.decode(id)?;
        }
        Self::new(tokens)
    }

    /// Parses the text form and checks every pitch against `vocab`.
    pub fn parse_with(text: &str, vocab: &Vocabulary) -> Result<Self, ScoreError> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != SLOTS {
            return Err(ScoreError::WrongTokenCount { expected: SLOTS, found: fields.len() });
        }
        let mut tokens = [Token::Rest; SLOTS];
        for (t, field) in tokens.iter_mut().zip(fields) {
            *t = field.parse()?;
            if let Token::Note(p) = t {
                vocab.check_pitch(*p)?;
            }
        }
        Self::new(tokens)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Measure {
    type Err = ScoreError;

    /// Parses against the default vocabulary.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with(s, &Vocabulary::default())
    }
}

impl Serialize for Measure {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Measure {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let fields: Vec<Token> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(serde::de::Error::custom)?;
        Measure::from_slice(&fields).map_err(serde::de::Error::custom)
    }
}

/// A sounding note: onset slot, pitch and length in slots. Never crosses the barline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_slot: u8,
    pub pitch: u8,
    pub duration_slots: u8,
}

/// Bijection between tokens and integer ids.
///
/// Pitches `pitch_lo..=pitch_hi` take ids `0..n`, followed by `Continue` and `Rest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    pitch_lo: u8,
    pitch_hi: u8,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { pitch_lo: DEFAULT_PITCH_LO, pitch_hi: DEFAULT_PITCH_HI }
    }
}

impl Vocabulary {
    pub fn new(pitch_lo: u8, pitch_hi: u8) -> Result<Self, ScoreError> {
        if pitch_lo > pitch_hi || pitch_hi > 127 {
            return Err(ScoreError::InvalidVocabulary { lo: pitch_lo, hi: pitch_hi });
        }
        Ok(Self { pitch_lo, pitch_hi })
    }

    pub fn pitch_lo(&self) -> u8 {
        self.pitch_lo
    }

    pub fn pitch_hi(&self) -> u8 {
        self.pitch_hi
    }

    fn pitch_count(&self) -> usize {
        (self.pitch_hi - self.pitch_lo) as usize + 1
    }

    pub fn size(&self) -> usize {
        self.pitch_count() + 2
    }

    pub fn continue_id(&self) -> usize {
        self.pitch_count()
    }

    pub fn rest_id(&self) -> usize {
        self.pitch_count() + 1
    }

    pub fn check_pitch(&self, pitch: u8) -> Result<(), ScoreError> {
        if (self.pitch_lo..=self.pitch_hi).contains(&pitch) {
            Ok(())
        } else {
            Err(ScoreError::PitchOutOfVocab { pitch, lo: self.pitch_lo, hi: self.pitch_hi })
        }
    }

    pub fn encode(&self, token: Token) -> Result<usize, ScoreError> {
        match token {
            Token::Note(p) => {
                self.check_pitch(p)?;
                Ok((p - self.pitch_lo) as usize)
            }
            Token::Continue => Ok(self.continue_id()),
            Token::Rest => Ok(self.rest_id()),
        }
    }

    pub fn decode(&self, id: usize) -> Result<Token, ScoreError> {
        let n = self.pitch_count();
        match id {
            _ if id < n => Ok(Token::Note(self.pitch_lo + id as u8)),
            _ if id == n => Ok(Token::Continue),
            _ if id == n + 1 => Ok(Token::Rest),
            _ => Err(ScoreError::IdOutOfRange { id, size: self.size() }),
        }
    }
}

//! Standard MIDI File export and import for single measures.
//!
//! Export writes format 0 with one track at 480 ticks per quarter note, so one
//! slot is 80 ticks. Import accepts format 0 or 1 at any PPQ resolution and
//! quantises onsets and offsets to the nearest slot (ties round down).

use thiserror::Error;

use crate::score::{Measure, NoteEvent, ScoreError, SLOTS, TICKS_PER_BEAT};

/// Ticks per quarter note used on export.
pub const PPQ: u16 = 480;
const VELOCITY: u8 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MidiError {
    #[error("simultaneous notes at tick {tick}")]
    Polyphonic { tick: u64 },
    #[error("content extends beyond one 4/4 bar")]
    TooLong,
    #[error("unreadable MIDI data: {0}")]
    Unreadable(String),
}

impl MidiError {
    pub fn kind(&self) -> &'static str {
        match self {
            MidiError::Polyphonic { .. } => "Polyphonic",
            MidiError::TooLong => "TooLong",
            MidiError::Unreadable(_) => "Unreadable",
        }
    }
}

impl From<ScoreError> for MidiError {
    fn from(e: ScoreError) -> Self {
        MidiError::Unreadable(e.to_string())
    }
}

fn write_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Encodes `measure` as a format-0 Standard MIDI File at `tempo_bpm`.
pub fn to_midi(measure: &Measure, tempo_bpm: f64) -> Vec<u8> {
    let slot_ticks = (PPQ as u32) / TICKS_PER_BEAT as u32;
    let tempo_bpm = if tempo_bpm.is_finite() && tempo_bpm > 0.0 { tempo_bpm } else { 120.0 };
    let usec_per_quarter = (60_000_000.0 / tempo_bpm).round().clamp(1.0, 0xff_ffff as f64) as u32;

    // (tick, order, bytes); note-offs sort before note-ons at the same tick
    let mut events: Vec<(u32, u8, [u8; 3])> = Vec::new();
    for e in measure.events() {
        let on = e.onset_slot as u32 * slot_ticks;
        let off = on + e.duration_slots as u32 * slot_ticks;
        events.push((on, 1, [0x90, e.pitch, VELOCITY]));
        events.push((off, 0, [0x80, e.pitch, 0]));
    }
    events.sort_by_key(|(tick, order, _)| (*tick, *order));

    let mut track = Vec::new();
    write_varlen(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&usec_per_quarter.to_be_bytes()[1..]);
    write_varlen(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    let mut last = 0;
    for (tick, _, bytes) in &events {
        write_varlen(&mut track, tick - last);
        track.extend_from_slice(bytes);
        last = *tick;
    }
    let bar_end = SLOTS as u32 * slot_ticks;
    write_varlen(&mut track, bar_end - last);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&PPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn eof(&self) -> bool {
        self.pos >= self.data.len()
    }

    fn byte(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| MidiError::Unreadable("unexpected end of data".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(MidiError::Unreadable("unexpected end of data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.byte()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Unreadable("variable-length quantity too long".into()))
    }
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    tick: u64,
    on: bool,
    pitch: u8,
}

fn read_track(data: &[u8], notes: &mut Vec<RawNote>) -> Result<(), MidiError> {
    let mut r = Reader::new(data);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    while !r.eof() {
        tick += r.varlen()? as u64;
        let mut status = r.byte()?;
        match status {
            0xff => {
                let kind = r.byte()?;
                let len = r.varlen()? as usize;
                r.take(len)?;
                if kind == 0x2f {
                    break;
                }
                continue;
            }
            0xf0 | 0xf7 => {
                let len = r.varlen()? as usize;
                r.take(len)?;
                continue;
            }
            _ => {}
        }
        let first_data = if status < 0x80 {
            let data = status;
            status = running.ok_or_else(|| MidiError::Unreadable("running status without status".into()))?;
            Some(data)
        } else {
            running = Some(status);
            None
        };
        let needs = match status & 0xf0 {
            0xc0 | 0xd0 => 1,
            0x80..=0xe0 => 2,
            _ => return Err(MidiError::Unreadable(format!("unexpected status byte {status:#x}"))),
        };
        let mut bytes = [0u8; 2];
        let mut filled = 0;
        if let Some(d) = first_data {
            bytes[0] = d;
            filled = 1;
        }
        while filled < needs {
            bytes[filled] = r.byte()?;
            filled += 1;
        }
        match status & 0xf0 {
            0x90 if bytes[1] > 0 => notes.push(RawNote { tick, on: true, pitch: bytes[0] }),
            0x90 | 0x80 => notes.push(RawNote { tick, on: false, pitch: bytes[0] }),
            _ => {}
        }
    }
    Ok(())
}

/// Nearest slot for `tick`; exact halves round down.
fn quantise(tick: u64, ppq: u64) -> u64 {
    let scaled = tick * TICKS_PER_BEAT as u64;
    let slot = scaled / ppq;
    let rem = scaled % ppq;
    if 2 * rem > ppq {
        slot + 1
    } else {
        slot
    }
}

/// Decodes a monophonic one-bar MIDI file into a rest-canonical measure.
pub fn from_midi(bytes: &[u8]) -> Result<Measure, MidiError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| MidiError::Unreadable("missing header".into()))? != b"MThd" {
        return Err(MidiError::Unreadable("missing MThd header".into()));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::Unreadable("short header".into()));
    }
    let header = r.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::Unreadable(format!("unsupported format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(MidiError::Unreadable("SMPTE or zero time division".into()));
    }
    let ppq = division as u64;

    let mut notes = Vec::new();
    while !r.eof() {
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let chunk = r.take(len)?;
        if id == b"MTrk" {
            read_track(chunk, &mut notes)?;
        }
    }
    notes.sort_by_key(|n| (n.tick, n.on));

    let mut spans: Vec<(u64, u64, u8)> = Vec::new();
    let mut active: Option<(u8, u64)> = None;
    for n in notes {
        match (n.on, active) {
            (true, Some(_)) => return Err(MidiError::Polyphonic { tick: n.tick }),
            (true, None) => active = Some((n.pitch, n.tick)),
            (false, Some((pitch, start))) if pitch == n.pitch => {
                spans.push((start, n.tick, pitch));
                active = None;
            }
            (false, _) => {}
        }
    }
    if active.is_some() {
        return Err(MidiError::Unreadable("note without note-off".into()));
    }

    let mut events: Vec<NoteEvent> = Vec::with_capacity(spans.len());
    for (start, end, pitch) in spans {
        let onset = quantise(start, ppq);
        let offset = quantise(end, ppq);
        if onset >= SLOTS as u64 || offset > SLOTS as u64 {
            return Err(MidiError::TooLong);
        }
        if let Some(prev) = events.last_mut() {
            if prev.onset_slot as u64 == onset {
                return Err(MidiError::Polyphonic { tick: start });
            }
            let prev_end = prev.onset_slot as u64 + prev.duration_slots as u64;
            if prev_end > onset {
                prev.duration_slots = (onset - prev.onset_slot as u64) as u8;
            }
        }
        let duration = offset.saturating_sub(onset).max(1);
        events.push(NoteEvent { onset_slot: onset as u8, pitch, duration_slots: duration as u8 });
    }
    Ok(Measure::from_events(&events)?)
}

//! Standard MIDI File reading and writing.
//!
//! Only what the note grid needs is kept: note on/off pairs, the resolution and
//! the first time signature. Tempo, controllers and SysEx are read past and
//! dropped.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Velocity used for every exported note.
pub const EXPORT_VELOCITY: u8 = 90;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    UnsupportedDivision,
    #[error("malformed track {track}: {reason}")]
    MalformedTrack { track: usize, reason: String },
    #[error("time signature changes from {from:?} to {to:?} at tick {tick}")]
    MeterChange {
        from: TimeSignature,
        to: TimeSignature,
        tick: u64,
    },
}

/// Serialized as `"N/D"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };

    pub fn new(numerator: u8, denominator: u8) -> Self {
        Self { numerator, denominator }
    }
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self::COMMON
    }
}

impl std::fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

impl From<TimeSignature> for String {
    fn from(ts: TimeSignature) -> String {
        ts.to_string()
    }
}

impl TryFrom<String> for TimeSignature {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::str::FromStr for TimeSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s.split_once('/').ok_or_else(|| format!("expected N/D, got {s:?}"))?;
        let numerator: u8 = n.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        let denominator: u8 = d.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        if numerator == 0 || !denominator.is_power_of_two() {
            return Err(format!("invalid time signature {s:?}"));
        }
        Ok(Self::new(numerator, denominator))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub track: usize,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64, track: usize) -> Self {
        Self {
            pitch,
            onset,
            duration,
            track,
        }
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }
}

/// A parsed piece: timed notes on a tick grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub notes: Vec<NoteEvent>,
    pub ticks_per_quarter: u16,
    pub time_signature: TimeSignature,
    pub title: String,
    pub style_tag: String,
}

impl Score {
    pub fn new(ticks_per_quarter: u16, time_signature: TimeSignature) -> Self {
        Self {
            notes: Vec::new(),
            ticks_per_quarter,
            time_signature,
            title: String::new(),
            style_tag: String::new(),
        }
    }

    /// Restores the (onset, track, pitch) ordering.
    pub fn sort_notes(&mut self) {
        self.notes.sort_by_key(|n| (n.onset, n.track, n.pitch, n.duration));
    }

    pub fn end_tick(&self) -> u64 {
        self.notes.iter().map(NoteEvent::end).max().unwrap_or(0)
    }

    /// Track indices that carry at least one note, ascending.
    pub fn note_tracks(&self) -> Vec<usize> {
        let mut tracks: Vec<usize> = self.notes.iter().map(|n| n.track).collect();
        tracks.sort_unstable();
        tracks.dedup();
        tracks
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Option<u8> {
        let b = *self.data.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    fn peek(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Option<u32> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Some(value);
            }
        }
        None
    }
}

pub(crate) fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7f) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

struct TrackScan {
    notes: Vec<(u8, u8, u64, u64)>, // channel, pitch, onset, duration
    time_signatures: Vec<(u64, TimeSignature)>,
    title: Option<String>,
}

fn scan_track(data: &[u8], track: usize) -> Result<TrackScan, MidiError> {
    let bad = |reason: &str| MidiError::MalformedTrack {
        track,
        reason: reason.to_string(),
    };
    let mut r = Reader::new(data);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
    let mut scan = TrackScan {
        notes: Vec::new(),
        time_signatures: Vec::new(),
        title: None,
    };

    let close = |open: &mut HashMap<(u8, u8), VecDeque<u64>>,
                 notes: &mut Vec<(u8, u8, u64, u64)>,
                 channel: u8,
                 pitch: u8,
                 tick: u64| {
        if let Some(onset) = open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) {
            if tick > onset {
                notes.push((channel, pitch, onset, tick - onset));
            }
        }
    };

    while r.remaining() > 0 {
        let delta = r.vlq().ok_or_else(|| bad("truncated delta time"))?;
        tick += u64::from(delta);
        let first = r.peek().ok_or_else(|| bad("missing event after delta"))?;
        let status = if first & 0x80 != 0 {
            r.pos += 1;
            first
        } else {
            running.ok_or_else(|| bad("data byte without running status"))?
        };

        match status {
            0xff => {
                running = None;
                let kind = r.u8().ok_or_else(|| bad("truncated meta event"))?;
                let len = r.vlq().ok_or_else(|| bad("truncated meta length"))? as usize;
                let body = r.take(len).ok_or_else(|| bad("truncated meta body"))?;
                match kind {
                    0x2f => break,
                    0x58 if len >= 2 => {
                        if body[1] > 7 {
                            return Err(bad("time signature denominator out of range"));
                        }
                        let ts = TimeSignature::new(body[0], 1u8 << body[1]);
                        if ts.numerator == 0 {
                            return Err(bad("time signature numerator is zero"));
                        }
                        scan.time_signatures.push((tick, ts));
                    }
                    0x03 if scan.title.is_none() => {
                        scan.title = Some(String::from_utf8_lossy(body).trim().to_string());
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq().ok_or_else(|| bad("truncated sysex length"))? as usize;
                r.take(len).ok_or_else(|| bad("truncated sysex body"))?;
            }
            0xf1..=0xfe => return Err(bad("system message inside track")),
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let kind = status & 0xf0;
                let n_data = if matches!(kind, 0xc0 | 0xd0) { 1 } else { 2 };
                let d = r.take(n_data).ok_or_else(|| bad("truncated channel event"))?;
                if d.iter().any(|b| b & 0x80 != 0) {
                    return Err(bad("status byte where data byte expected"));
                }
                match kind {
                    0x90 if d[1] > 0 => {
                        open.entry((channel, d[0])).or_default().push_back(tick);
                    }
                    0x80 | 0x90 => close(&mut open, &mut scan.notes, channel, d[0], tick),
                    _ => {}
                }
            }
        }
    }

    let mut dangling: Vec<((u8, u8), VecDeque<u64>)> = open.into_iter().collect();
    dangling.sort_by_key(|(k, _)| *k);
    for ((channel, pitch), onsets) in dangling {
        for onset in onsets {
            log::warn!("track {track}: note-on {pitch} at tick {onset} never closed; closing at track end");
            if tick > onset {
                scan.notes.push((channel, pitch, onset, tick - onset));
            }
        }
    }
    Ok(scan)
}

/// Parses an SMF type 0 or 1 file.
///
/// Track indices count note-bearing tracks the way [`write_midi`] lays them
/// out: in a type-1 file whose first chunk holds no notes (a conductor track),
/// chunk `k` becomes track `k - 1`. In a type-0 file, channels play the role of
/// tracks and are numbered in ascending channel order.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(4)
        .ok_or_else(|| MidiError::MalformedHeader("file shorter than chunk tag".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd tag".into()));
    }
    let len = r
        .u32()
        .ok_or_else(|| MidiError::MalformedHeader("truncated header length".into()))? as usize;
    if len < 6 {
        return Err(MidiError::MalformedHeader(format!("header length {len} < 6")));
    }
    let header = r
        .take(len)
        .ok_or_else(|| MidiError::MalformedHeader("truncated header chunk".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntrks = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter".into()));
    }

    let mut scans = Vec::new();
    while scans.len() < ntrks && r.remaining() >= 8 {
        let tag = r.take(4).expect("length checked");
        let len = r.u32().expect("length checked") as usize;
        let body = r.take(len).ok_or_else(|| MidiError::MalformedTrack {
            track: scans.len(),
            reason: "chunk extends past end of file".into(),
        })?;
        if tag == b"MTrk" {
            scans.push(scan_track(body, scans.len())?);
        }
    }
    if scans.len() < ntrks {
        log::warn!("header announces {ntrks} tracks, found {}", scans.len());
    }

    let mut time_signatures: Vec<(u64, usize, TimeSignature)> = scans
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.time_signatures.iter().map(move |&(t, ts)| (t, i, ts)))
        .collect();
    time_signatures.sort_by_key(|&(t, i, _)| (t, i));
    let time_signature = time_signatures.first().map(|&(_, _, ts)| ts).unwrap_or_default();
    if let Some(&(tick, _, to)) = time_signatures
        .iter()
        .find(|&&(t, _, ts)| t > 0 && ts != time_signature)
    {
        return Err(MidiError::MeterChange {
            from: time_signature,
            to,
            tick,
        });
    }

    let mut notes = Vec::new();
    if format == 0 {
        let channels: BTreeMap<u8, usize> = {
            let mut chans: Vec<u8> = scans.iter().flat_map(|s| s.notes.iter().map(|n| n.0)).collect();
            chans.sort_unstable();
            chans.dedup();
            chans.into_iter().enumerate().map(|(i, c)| (c, i)).collect()
        };
        for scan in &scans {
            for &(ch, pitch, onset, duration) in &scan.notes {
                notes.push(NoteEvent::new(pitch, onset, duration, channels[&ch]));
            }
        }
    } else {
        let shift = usize::from(scans.first().is_some_and(|s| s.notes.is_empty()));
        for (i, scan) in scans.iter().enumerate() {
            for &(_, pitch, onset, duration) in &scan.notes {
                notes.push(NoteEvent::new(pitch, onset, duration, i - shift));
            }
        }
    }

    let mut score = Score::new(division, time_signature);
    score.notes = notes;
    score.title = scans.iter().find_map(|s| s.title.clone()).unwrap_or_default();
    score.sort_notes();
    Ok(score)
}

fn chunk(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

fn end_of_track(body: &mut Vec<u8>, delta: u32) {
    write_vlq(body, delta);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
}

fn conductor_track(score: &Score) -> Vec<u8> {
    let mut body = Vec::new();
    if !score.title.is_empty() {
        write_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x03]);
        write_vlq(&mut body, score.title.len() as u32);
        body.extend_from_slice(score.title.as_bytes());
    }
    let ts = score.time_signature;
    let dd = ts.denominator.max(1).trailing_zeros() as u8;
    write_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x58, 0x04, ts.numerator, dd, 24, 8]);
    end_of_track(&mut body, 0);
    body
}

fn note_track(notes: &[&NoteEvent], channel: u8) -> Vec<u8> {
    // (tick, is_on, pitch); offs sort before ons at the same tick
    let mut events: Vec<(u64, bool, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        events.push((n.onset, true, n.pitch));
        events.push((n.end(), false, n.pitch));
    }
    events.sort();
    let mut body = Vec::new();
    let mut last = 0u64;
    for (tick, on, pitch) in events {
        write_vlq(&mut body, (tick - last) as u32);
        last = tick;
        if on {
            body.extend_from_slice(&[0x90 | channel, pitch, EXPORT_VELOCITY]);
        } else {
            body.extend_from_slice(&[0x80 | channel, pitch, 0]);
        }
    }
    end_of_track(&mut body, 0);
    body
}

/// Serializes a score as SMF type 1: a conductor track carrying the time
/// signature, then one chunk per track index `0..=max_track`.
///
/// Overlapping notes of the same pitch on one track cannot be represented
/// unambiguously in SMF and will not round-trip.
pub fn write_midi(score: &Score) -> Vec<u8> {
    let n_tracks = score.notes.iter().map(|n| n.track + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut header = Vec::with_capacity(6);
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((n_tracks + 1) as u16).to_be_bytes());
    header.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());
    chunk(&mut out, b"MThd", &header);
    chunk(&mut out, b"MTrk", &conductor_track(score));
    for track in 0..n_tracks {
        let notes: Vec<&NoteEvent> = score.notes.iter().filter(|n| n.track == track).collect();
        let channel = (track % 16) as u8;
        chunk(&mut out, b"MTrk", &note_track(&notes, channel));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn type0(ppq: u16, track: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        chunk(&mut out, b"MThd", &[0, 0, 0, 1, (ppq >> 8) as u8, ppq as u8]);
        chunk(&mut out, b"MTrk", track);
        out
    }

    fn one_note_track(with_ts: bool) -> Vec<u8> {
        let mut t = Vec::new();
        if with_ts {
            t.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 3, 2, 24, 8]);
        }
        t.extend_from_slice(&[0x00, 0x90, 60, 100]);
        // 480 = 0x83 0x60
        t.extend_from_slice(&[0x83, 0x60, 0x80, 60, 0]);
        t.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        t
    }

    #[test]
    fn minimal_type0() {
        let score = parse_midi(&type0(480, &one_note_track(false))).unwrap();
        assert_eq!(score.ticks_per_quarter, 480);
        assert_eq!(score.time_signature, TimeSignature::new(4, 4));
        assert_eq!(score.notes, vec![NoteEvent::new(60, 0, 480, 0)]);
    }

    #[test]
    fn time_signature_meta() {
        let score = parse_midi(&type0(480, &one_note_track(true))).unwrap();
        assert_eq!(score.time_signature, TimeSignature::new(3, 4));
    }

    #[test]
    fn truncated_after_magic() {
        assert!(matches!(parse_midi(b"MThd"), Err(MidiError::MalformedHeader(_))));
        assert!(matches!(
            parse_midi(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0"),
            Err(MidiError::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_type2_and_smpte() {
        let mut f = type0(480, &one_note_track(false));
        f[9] = 2;
        assert_eq!(parse_midi(&f), Err(MidiError::UnsupportedFormat(2)));
        let mut f = type0(480, &one_note_track(false));
        f[12] = 0xe7;
        assert_eq!(parse_midi(&f), Err(MidiError::UnsupportedDivision));
    }

    #[test]
    fn running_status_and_velocity_zero_off() {
        let track = [
            0x00, 0x90, 60, 80, // on
            0x60, 64, 80, // running status on (delta 96)
            0x60, 60, 0, // vel-0 off for 60 at 192
            0x60, 64, 0, // off for 64 at 288
            0x00, 0xf0, 0x02, 0x01, 0xf7, // sysex, skipped
            0x00, 0xff, 0x2f, 0x00,
        ];
        let score = parse_midi(&type0(96, &track)).unwrap();
        assert_eq!(
            score.notes,
            vec![NoteEvent::new(60, 0, 192, 0), NoteEvent::new(64, 96, 192, 0)]
        );
    }

    #[test]
    fn dangling_note_closed_at_track_end() {
        let track = [0x00, 0x90, 62, 80, 0x81, 0x00, 0xff, 0x2f, 0x00];
        let score = parse_midi(&type0(96, &track)).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(62, 0, 128, 0)]);
    }

    #[test]
    fn meter_change_is_rejected() {
        let track = [
            0x00, 0xff, 0x58, 0x04, 4, 2, 24, 8, 0x00, 0x90, 60, 80, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x58, 0x04, 3, 2,
            24, 8, 0x00, 0xff, 0x2f, 0x00,
        ];
        assert!(matches!(
            parse_midi(&type0(96, &track)),
            Err(MidiError::MeterChange { tick: 96, .. })
        ));
    }

    #[test]
    fn format0_channels_become_tracks() {
        let track = [
            0x00, 0x93, 48, 80, 0x00, 0x90, 72, 80, 0x60, 0x83, 48, 0, 0x00, 0x80, 72, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        let score = parse_midi(&type0(96, &track)).unwrap();
        assert_eq!(
            score.notes,
            vec![NoteEvent::new(72, 0, 96, 0), NoteEvent::new(48, 0, 96, 1)]
        );
    }

    #[test]
    fn vlq_encoding() {
        for (v, bytes) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x2000, vec![0xc0, 0x00]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            write_vlq(&mut out, v);
            assert_eq!(out, bytes);
            assert_eq!(Reader::new(&bytes).vlq(), Some(v));
        }
    }

    #[test]
    fn write_round_trip() {
        let mut score = parse_midi(&type0(480, &one_note_track(true))).unwrap();
        let again = parse_midi(&write_midi(&score)).unwrap();
        assert_eq!(again, score);
        score.title = "A Tune".into();
        assert_eq!(parse_midi(&write_midi(&score)).unwrap().title, "A Tune");
    }

    #[test]
    fn empty_score_writes_conductor_only() {
        let score = Score::new(480, TimeSignature::new(6, 8));
        let bytes = write_midi(&score);
        assert_eq!(bytes.windows(4).filter(|w| w == b"MTrk").count(), 1);
        let back = parse_midi(&bytes).unwrap();
        assert!(back.notes.is_empty());
        assert_eq!(back.time_signature, TimeSignature::new(6, 8));
    }

    #[test]
    fn two_tracks_make_three_chunks() {
        let mut score = Score::new(480, TimeSignature::COMMON);
        score.notes = vec![
            NoteEvent::new(48, 0, 1920, 1),
            NoteEvent::new(52, 0, 1920, 1),
            NoteEvent::new(72, 0, 480, 0),
            NoteEvent::new(74, 480, 480, 0),
        ];
        score.sort_notes();
        let bytes = write_midi(&score);
        assert_eq!(bytes.windows(4).filter(|w| w == b"MTrk").count(), 3);
        assert_eq!(parse_midi(&bytes).unwrap(), score);
    }
}

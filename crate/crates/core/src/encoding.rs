//! Sixteenth-note quantization and the one-hot melody/harmony frame encoding.
//!
//! Melody uses 35 classes: class 0 is a rest and class `1 + k` is MIDI pitch
//! `55 + k` (G3 to E6). Harmony classes come from a [`ChordDictionary`]. A
//! frame is the melody one-hot followed by the harmony one-hot, followed by
//! any structure-feature columns.

use std::borrow::Borrow;
use std::io::Write;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harmony::{realize_chord, ChordDictionary, ChordLabel, PitchSet};
use crate::midi::{Score, TimeSignature};

pub const MELODY_LOW: u8 = 55;
pub const MELODY_HIGH: u8 = 88;
pub const MELODY_CLASSES: usize = (MELODY_HIGH - MELODY_LOW) as usize + 2;
pub const REST_CLASS: usize = 0;
pub const DEFAULT_CHUNK_LEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("melody track {0} has no notes")]
    EmptyMelody(usize),
    #[error("score resolution is zero")]
    ZeroResolution,
    #[error("melody pitch {0} outside {MELODY_LOW}..={MELODY_HIGH}")]
    PitchOutOfRange(u8),
    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: usize, reason: String },
    #[error("sequence {index} has width {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("chunk length must be at least 2, got {0}")]
    ChunkTooShort(usize),
    #[error("batch size must be positive")]
    ZeroBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Step {
    pub melody: Option<u8>,
    pub harmony: PitchSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedSong {
    pub steps: Vec<Step>,
    pub time_signature: TimeSignature,
    pub style_tag: String,
    pub title: String,
}

impl QuantizedSong {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn melody(&self) -> Vec<Option<u8>> {
        self.steps.iter().map(|s| s.melody).collect()
    }
}

/// Which tracks carry melody and harmony.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrackSelection {
    /// Melody is the note-bearing track with the highest mean pitch; every
    /// other track is harmony.
    #[default]
    Auto,
    Explicit {
        melody: usize,
        harmony: Vec<usize>,
    },
}

impl TrackSelection {
    pub fn resolve(&self, score: &Score) -> Option<(usize, Vec<usize>)> {
        match self {
            TrackSelection::Auto => select_tracks(score),
            TrackSelection::Explicit { melody, harmony } => Some((*melody, harmony.clone())),
        }
    }
}

pub fn select_tracks(score: &Score) -> Option<(usize, Vec<usize>)> {
    let tracks = score.note_tracks();
    let mean = |t: usize| {
        let (sum, n) = score
            .notes
            .iter()
            .filter(|n| n.track == t)
            .fold((0u64, 0u64), |(s, c), n| (s + u64::from(n.pitch), c + 1));
        sum as f64 / n as f64
    };
    let melody = *tracks
        .iter()
        .max_by(|&&a, &&b| mean(a).total_cmp(&mean(b)).then(b.cmp(&a)))?;
    let harmony = tracks.into_iter().filter(|&t| t != melody).collect();
    Some((melody, harmony))
}

/// Shifts a pitch by octaves into the melody range.
pub fn fold_into_melody_range(pitch: u8) -> u8 {
    let mut p = pitch;
    while p < MELODY_LOW {
        p += 12;
    }
    while p > MELODY_HIGH {
        p -= 12;
    }
    p
}

/// Places notes on a sixteenth-note grid (`ticks_per_quarter / 4` ticks per
/// step). A note sounds in a frame when it covers at least half of it.
pub fn quantize(score: &Score, melody_track: usize, harmony_tracks: &[usize]) -> Result<QuantizedSong, EncodeError> {
    if score.ticks_per_quarter == 0 {
        return Err(EncodeError::ZeroResolution);
    }
    if !score.notes.iter().any(|n| n.track == melody_track) {
        return Err(EncodeError::EmptyMelody(melody_track));
    }
    // Work in quarter-ticks so a step is exactly `ppq` units long.
    let step = u64::from(score.ticks_per_quarter);
    let end = score.end_tick() * 4;
    let n_steps = end.div_ceil(step) as usize;
    let mut melody: Vec<Option<u8>> = vec![None; n_steps];
    let mut harmony = vec![PitchSet::EMPTY; n_steps];

    for note in &score.notes {
        let is_melody = note.track == melody_track;
        if !is_melody && !harmony_tracks.contains(&note.track) {
            continue;
        }
        let (a, b) = (note.onset * 4, note.end() * 4);
        let first = (a / step) as usize;
        let last = b.div_ceil(step) as usize;
        for t in first..last.min(n_steps) {
            let lo = a.max(t as u64 * step);
            let hi = b.min((t as u64 + 1) * step);
            if hi <= lo || 2 * (hi - lo) < step {
                continue;
            }
            if is_melody {
                if melody[t].is_none_or(|p| note.pitch > p) {
                    melody[t] = Some(note.pitch);
                }
            } else {
                harmony[t].insert(note.pitch);
            }
        }
    }

    let mut folded = false;
    let steps = melody
        .into_iter()
        .zip(harmony)
        .map(|(m, harmony)| Step {
            melody: m.map(|p| {
                let q = fold_into_melody_range(p);
                folded |= q != p;
                q
            }),
            harmony,
        })
        .collect();
    if folded {
        log::warn!("{}: melody pitches transposed by octaves into range", score.title);
    }
    Ok(QuantizedSong {
        steps,
        time_signature: score.time_signature,
        style_tag: score.style_tag.clone(),
        title: score.title.clone(),
    })
}

/// Quantizes with the given track selection.
pub fn quantize_with(score: &Score, selection: &TrackSelection) -> Result<QuantizedSong, EncodeError> {
    let (melody, harmony) = selection.resolve(score).ok_or(EncodeError::EmptyMelody(0))?;
    quantize(score, melody, &harmony)
}

pub fn melody_class(pitch: Option<u8>) -> Result<usize, EncodeError> {
    match pitch {
        None => Ok(REST_CLASS),
        Some(p) if (MELODY_LOW..=MELODY_HIGH).contains(&p) => Ok(1 + usize::from(p - MELODY_LOW)),
        Some(p) => Err(EncodeError::PitchOutOfRange(p)),
    }
}

pub fn melody_pitch(class: usize) -> Option<u8> {
    match class {
        REST_CLASS => None,
        c => Some(MELODY_LOW + (c - 1) as u8),
    }
}

/// A song as a `T x D` frame matrix plus per-frame classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub frames: Array2<f32>,
    pub melody_targets: Vec<usize>,
    pub harmony_targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub harmony_classes: usize,
    pub feature_dim: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn base_dim(&self) -> usize {
        MELODY_CLASSES + self.harmony_classes
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Builds a featureless sequence from class indices.
    pub fn from_classes(melody: &[usize], harmony: &[usize], harmony_classes: usize) -> Self {
        assert_eq!(melody.len(), harmony.len());
        let mut frames = Array2::zeros((melody.len(), MELODY_CLASSES + harmony_classes));
        for (t, (&m, &h)) in melody.iter().zip(harmony).enumerate() {
            frames[[t, m]] = 1.0;
            frames[[t, MELODY_CLASSES + h]] = 1.0;
        }
        Self {
            frames,
            melody_targets: melody.to_vec(),
            harmony_targets: harmony.to_vec(),
            mask: vec![true; melody.len()],
            harmony_classes,
            feature_dim: 0,
        }
    }

    /// Checks the one-hot layout of every real frame against the stored classes.
    pub fn validate(&self) -> Result<(), EncodeError> {
        for (t, row) in self.frames.outer_iter().enumerate() {
            if !self.mask[t] {
                continue;
            }
            let m = one_hot_index(row.slice(s![..MELODY_CLASSES]).iter())
                .ok_or_else(|| invalid(t, "melody block is not one-hot"))?;
            let h = one_hot_index(row.slice(s![MELODY_CLASSES..self.base_dim()]).iter())
                .ok_or_else(|| invalid(t, "harmony block is not one-hot"))?;
            if m != self.melody_targets[t] || h != self.harmony_targets[t] {
                return Err(invalid(t, "class indices disagree with frame bits"));
            }
        }
        Ok(())
    }

    /// Debug dump: `d0..dD-1,melody_target,harmony_target,mask`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("d{i}")).collect();
        writeln!(out, "{},melody_target,harmony_target,mask", header.join(","))?;
        for (t, row) in self.frames.outer_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{}",
                cells.join(","),
                self.melody_targets[t],
                self.harmony_targets[t],
                u8::from(self.mask[t])
            )?;
        }
        Ok(())
    }
}

fn invalid(frame: usize, reason: &str) -> EncodeError {
    EncodeError::InvalidFrame {
        frame,
        reason: reason.to_string(),
    }
}

fn one_hot_index<'a>(values: impl Iterator<Item = &'a f32>) -> Option<usize> {
    let mut found = None;
    for (i, &v) in values.enumerate() {
        if v == 1.0 {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    found
}

pub fn encode_song(song: &QuantizedSong, dict: &ChordDictionary) -> Result<EncodedSequence, EncodeError> {
    let melody = song
        .steps
        .iter()
        .map(|s| melody_class(s.melody))
        .collect::<Result<Vec<_>, _>>()?;
    let harmony: Vec<usize> = song.steps.iter().map(|s| dict.class_of(&s.harmony)).collect();
    Ok(EncodedSequence::from_classes(&melody, &harmony, dict.len()))
}

/// Inverse of [`encode_song`] up to chord voicing. Padding frames are dropped
/// and the time signature is reported as 4/4.
pub fn decode_sequence(
    seq: &EncodedSequence,
    dict: &ChordDictionary,
    register: u8,
) -> Result<QuantizedSong, EncodeError> {
    if seq.harmony_classes != dict.len() || seq.dim() < seq.base_dim() {
        return Err(EncodeError::DimensionMismatch {
            index: 0,
            expected: MELODY_CLASSES + dict.len(),
            found: seq.base_dim(),
        });
    }
    let mut steps = Vec::with_capacity(seq.len());
    for (t, row) in seq.frames.outer_iter().enumerate() {
        if !seq.mask[t] {
            continue;
        }
        let m = one_hot_index(row.slice(s![..MELODY_CLASSES]).iter())
            .ok_or_else(|| invalid(t, "melody block is not one-hot"))?;
        let h = one_hot_index(row.slice(s![MELODY_CLASSES..seq.base_dim()]).iter())
            .ok_or_else(|| invalid(t, "harmony block is not one-hot"))?;
        let harmony = match dict.label(h) {
            Some(ChordLabel::Unknown) | None => PitchSet::EMPTY,
            Some(label) => realize_chord(label, register).map_err(|e| invalid(t, &e.to_string()))?,
        };
        steps.push(Step {
            melody: melody_pitch(m),
            harmony,
        });
    }
    Ok(QuantizedSong {
        steps,
        time_signature: TimeSignature::COMMON,
        style_tag: String::new(),
        title: String::new(),
    })
}

/// How positions past the end of a song are treated when batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Padding is never supervised.
    #[default]
    Masked,
    /// Every position of the padded song is supervised; targets past the end
    /// are (rest, unknown chord).
    Supervised,
}

/// One time-major chunk of up to `batch_size` songs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `chunk_len x lanes x D`
    pub inputs: Array3<f32>,
    pub melody_targets: Array2<usize>,
    pub harmony_targets: Array2<usize>,
    pub mask: Array2<bool>,
    /// Whether each lane continues the song of the previous chunk.
    pub carryover: Vec<bool>,
    pub chunk_index: usize,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn lanes(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn pad_and_batch<S: Borrow<EncodedSequence>>(
    seqs: &[S],
    chunk_len: usize,
    batch_size: usize,
) -> Result<Vec<Batch>, EncodeError> {
    pad_and_batch_with(seqs, chunk_len, batch_size, PaddingMode::Masked)
}

/// Splits songs into lanes of `batch_size` (in input order) and each group into
/// consecutive `chunk_len` chunks. Inputs at position `t` are frame `t`;
/// targets are the classes of frame `t + 1`.
pub fn pad_and_batch_with<S: Borrow<EncodedSequence>>(
    seqs: &[S],
    chunk_len: usize,
    batch_size: usize,
    mode: PaddingMode,
) -> Result<Vec<Batch>, EncodeError> {
    if chunk_len < 2 {
        return Err(EncodeError::ChunkTooShort(chunk_len));
    }
    if batch_size == 0 {
        return Err(EncodeError::ZeroBatch);
    }
    let Some(first) = seqs.first().map(Borrow::borrow) else {
        return Ok(Vec::new());
    };
    let dim = first.dim();
    for (index, s) in seqs.iter().map(Borrow::borrow).enumerate() {
        if s.dim() != dim || s.harmony_classes != first.harmony_classes {
            return Err(EncodeError::DimensionMismatch {
                index,
                expected: dim,
                found: s.dim(),
            });
        }
    }

    let mut batches = Vec::new();
    for group in seqs.chunks(batch_size) {
        let lanes = group.len();
        let n_chunks = group
            .iter()
            .map(|s| s.borrow().len().div_ceil(chunk_len))
            .max()
            .unwrap_or(0);
        for k in 0..n_chunks {
            let mut batch = Batch {
                inputs: Array3::zeros((chunk_len, lanes, dim)),
                melody_targets: Array2::zeros((chunk_len, lanes)),
                harmony_targets: Array2::zeros((chunk_len, lanes)),
                mask: Array2::from_elem((chunk_len, lanes), false),
                carryover: vec![k > 0; lanes],
                chunk_index: k,
            };
            for (lane, seq) in group.iter().map(Borrow::borrow).enumerate() {
                let len = seq.len();
                let padded = len.div_ceil(chunk_len) * chunk_len;
                let unknown = seq.harmony_classes - 1;
                for i in 0..chunk_len {
                    let t = k * chunk_len + i;
                    if t < len {
                        batch.inputs.slice_mut(s![i, lane, ..]).assign(&seq.frames.row(t));
                    }
                    if t + 1 < len && seq.mask[t] && seq.mask[t + 1] {
                        batch.melody_targets[[i, lane]] = seq.melody_targets[t + 1];
                        batch.harmony_targets[[i, lane]] = seq.harmony_targets[t + 1];
                        batch.mask[[i, lane]] = true;
                    } else if mode == PaddingMode::Supervised && t < padded {
                        batch.melody_targets[[i, lane]] = REST_CLASS;
                        batch.harmony_targets[[i, lane]] = unknown;
                        batch.mask[[i, lane]] = true;
                    }
                }
            }
            batches.push(batch);
        }
    }
    Ok(batches)
}

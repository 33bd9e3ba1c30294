//! Autoregressive sampling from a trained checkpoint, with the feature columns
//! synthesized step by step, and export of the result to a two-track score.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::encoding::{melody_pitch, EncodeError, EncodedSequence, MELODY_CLASSES, REST_CLASS};
use crate::features::{countdown_at, fill_markers, FeatureConfig};
use crate::harmony::{realize_chord, ChordDictionary, ChordLabel, HarmonyError};
use crate::midi::{NoteEvent, Score, TimeSignature};
use crate::nn::{NnError, StateBundle};

pub const DEFAULT_LENGTH: usize = 384;
/// Steps per bar assumed by the harmony-stability statistic and by export.
pub const BAR_STEPS: usize = 16;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("checkpoint and configuration disagree: {0}")]
    ConfigMismatch(String),
    #[error("invalid generation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    InvalidFrame(#[from] EncodeError),
    #[error(transparent)]
    Harmony(#[from] HarmonyError),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub length: usize,
    /// Softmax temperature; `0` selects the most likely class of each head.
    pub temperature: f64,
    /// Frames of the priming song fed before sampling starts.
    pub prime_len: usize,
    pub seed: u64,
    /// Octave of chord roots in the exported harmony track.
    pub register: u8,
    /// Restart held melody notes at every beat on export.
    pub retrigger: bool,
    pub ticks_per_quarter: u16,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            length: DEFAULT_LENGTH,
            temperature: 1.0,
            prime_len: 16,
            seed: 0,
            register: 3,
            retrigger: false,
            ticks_per_quarter: 480,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidConfig(m));
        if self.length == 0 {
            return bad("length must be at least 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            ));
        }
        if self.ticks_per_quarter < 4 || !self.ticks_per_quarter.is_multiple_of(4) {
            return bad("ticks_per_quarter must be a positive multiple of 4".into());
        }
        Ok(())
    }
}

/// Feature columns for generation step `t`: the count-down runs over the whole
/// requested length and reaches zero on the final frame; meter markers start
/// on a downbeat.
pub fn feature_generator(t: usize, gcfg: &GenConfig, fcfg: &FeatureConfig) -> Vec<f32> {
    let mut row = vec![0.0; fcfg.width()];
    let mut offset = 0;
    if fcfg.use_countdown {
        row[0] = countdown_at(t, gcfg.length - 1);
        offset = 1;
    }
    if fcfg.marker_width() > 0 {
        fill_markers(&mut row[offset..], t, fcfg);
    }
    row
}

fn sample_head<R: Rng + ?Sized>(logits: &[f32], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| f64::from(v) / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws `(melody class, harmony class)` from the two heads, melody first.
pub fn sample_step<R: Rng + ?Sized>(
    logits: &[f32],
    melody_classes: usize,
    temperature: f64,
    rng: &mut R,
) -> (usize, usize) {
    let melody = sample_head(&logits[..melody_classes], temperature, rng);
    let harmony = sample_head(&logits[melody_classes..], temperature, rng);
    (melody, harmony)
}

/// The first `k` `(melody, harmony)` class pairs of a sequence's real frames.
pub fn prime_from_sequence(seq: &EncodedSequence, k: usize) -> Vec<(usize, usize)> {
    (0..seq.len())
        .filter(|&t| seq.mask[t])
        .take(k)
        .map(|t| (seq.melody_targets[t], seq.harmony_targets[t]))
        .collect()
}

/// Generates `gcfg.length` frames. With a prime, its first `gcfg.prime_len`
/// frames are fed as given and sampling continues from there; without one,
/// frame 0 is a rest over the unknown chord.
pub fn generate(
    ckpt: &Checkpoint,
    gcfg: &GenConfig,
    prime: Option<&[(usize, usize)]>,
) -> Result<EncodedSequence, GenError> {
    gcfg.validate()?;
    let shape = ckpt.params.shape;
    let fcfg = &ckpt.meta.features;
    let harmony_classes = shape.harmony_classes;
    let base = MELODY_CLASSES + harmony_classes;
    if shape.melody_classes != MELODY_CLASSES {
        return Err(GenError::ConfigMismatch(format!(
            "model has {} melody classes, encoding uses {MELODY_CLASSES}",
            shape.melody_classes
        )));
    }
    if shape.input_dim != base + fcfg.width() {
        return Err(GenError::ConfigMismatch(format!(
            "feature width {} but model input {} leaves {}",
            fcfg.width(),
            shape.input_dim,
            shape.input_dim as isize - base as isize
        )));
    }
    let seeds: Vec<(usize, usize)> = match prime {
        Some(frames) => {
            let frames = &frames[..frames.len().min(gcfg.prime_len)];
            if frames.is_empty() {
                return Err(GenError::InvalidConfig("prime has no frames".into()));
            }
            if frames.len() >= gcfg.length {
                return Err(GenError::InvalidConfig(format!(
                    "prime of {} frames does not fit length {}",
                    frames.len(),
                    gcfg.length
                )));
            }
            if let Some(&(m, h)) = frames
                .iter()
                .find(|&&(m, h)| m >= MELODY_CLASSES || h >= harmony_classes)
            {
                return Err(GenError::ConfigMismatch(format!(
                    "prime frame ({m}, {h}) outside the model's classes"
                )));
            }
            frames.to_vec()
        }
        None => vec![(REST_CLASS, harmony_classes - 1)],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let mut state = StateBundle::<f32>::zeros(shape.num_layers, 1, shape.hidden_size);
    let mut melody = Vec::with_capacity(gcfg.length);
    let mut harmony = Vec::with_capacity(gcfg.length);
    let mut frames = ndarray::Array2::<f32>::zeros((gcfg.length, shape.input_dim));
    let mut next = seeds[0];
    for t in 0..gcfg.length {
        let (m, h) = if t < seeds.len() { seeds[t] } else { next };
        melody.push(m);
        harmony.push(h);
        let mut row = frames.row_mut(t);
        row[m] = 1.0;
        row[MELODY_CLASSES + h] = 1.0;
        for (j, v) in feature_generator(t, gcfg, fcfg).into_iter().enumerate() {
            row[base + j] = v;
        }
        if t + 1 == gcfg.length {
            break;
        }
        let input = Array3::from_shape_vec((1, 1, shape.input_dim), row.to_vec()).expect("row length");
        let out = ckpt.params.forward(input.view(), &[true], &state, false, &mut rng)?;
        state = out.state;
        if t + 1 >= seeds.len() {
            let logits = out.logits.as_slice().expect("contiguous logits");
            next = sample_step(logits, MELODY_CLASSES, gcfg.temperature, &mut rng);
        }
    }
    Ok(EncodedSequence {
        frames,
        melody_targets: melody,
        harmony_targets: harmony,
        mask: vec![true; gcfg.length],
        harmony_classes,
        feature_dim: fcfg.width(),
    })
}

/// Maximal runs of equal values; `breaks(t)` forces a new run at `t`.
fn runs<T: PartialEq + Copy>(values: &[T], breaks: impl Fn(usize) -> bool) -> Vec<(usize, usize, T)> {
    let mut out: Vec<(usize, usize, T)> = Vec::new();
    for (t, &v) in values.iter().enumerate() {
        match out.last_mut() {
            Some((_, end, last)) if *last == v && !breaks(t) => *end = t + 1,
            _ => out.push((t, t + 1, v)),
        }
    }
    out
}

/// Renders a sequence as melody (track 0) and root-position triads (track 1).
/// Repeated frames merge into held notes; unknown chords are silent.
pub fn export(seq: &EncodedSequence, dict: &ChordDictionary, gcfg: &GenConfig) -> Result<Score, GenError> {
    gcfg.validate()?;
    seq.validate()?;
    if seq.harmony_classes != dict.len() {
        return Err(GenError::ConfigMismatch(format!(
            "sequence has {} chord classes, dictionary {}",
            seq.harmony_classes,
            dict.len()
        )));
    }
    let real: Vec<usize> = (0..seq.len()).filter(|&t| seq.mask[t]).collect();
    let melody: Vec<Option<u8>> = real.iter().map(|&t| melody_pitch(seq.melody_targets[t])).collect();
    let harmony: Vec<usize> = real.iter().map(|&t| seq.harmony_targets[t]).collect();
    let step = u64::from(gcfg.ticks_per_quarter / 4);
    let beat = BAR_STEPS / 4;
    let retrigger = gcfg.retrigger;

    let mut score = Score::new(gcfg.ticks_per_quarter, TimeSignature::COMMON);
    score.title = "generated".into();
    for (start, end, pitch) in runs(&melody, |t| retrigger && t % beat == 0) {
        if let Some(p) = pitch {
            score
                .notes
                .push(NoteEvent::new(p, start as u64 * step, (end - start) as u64 * step, 0));
        }
    }
    for (start, end, class) in runs(&harmony, |_| false) {
        match dict.label(class) {
            Some(ChordLabel::Unknown) | None => continue,
            Some(label) => {
                for p in realize_chord(label, gcfg.register)?.iter() {
                    score
                        .notes
                        .push(NoteEvent::new(p, start as u64 * step, (end - start) as u64 * step, 1));
                }
            }
        }
    }
    score.sort_notes();
    Ok(score)
}

/// Fraction of complete `BAR_STEPS`-step bars whose harmony class changes at
/// most once. `None` when the sequence is shorter than one bar.
pub fn harmony_stability(seq: &EncodedSequence) -> Option<f64> {
    let harmony: Vec<usize> = (0..seq.len())
        .filter(|&t| seq.mask[t])
        .map(|t| seq.harmony_targets[t])
        .collect();
    let bars: Vec<&[usize]> = harmony.chunks_exact(BAR_STEPS).collect();
    if bars.is_empty() {
        return None;
    }
    let stable = bars
        .iter()
        .filter(|bar| bar.windows(2).filter(|w| w[0] != w[1]).count() <= 1)
        .count();
    Some(stable as f64 / bars.len() as f64)
}

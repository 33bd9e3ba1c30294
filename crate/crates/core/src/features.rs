//! Temporal-structure feature columns: a normalized count-down to the onset of
//! the last melody note, and one-hot meter markers counted from the first
//! downbeat.
//!
//! Feature columns follow the base frame in this order: count-down, sub-beat
//! marker (`steps_per_beat` wide), beat marker (`beats_per_bar` wide).

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodedSequence, QuantizedSong};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("melody is silent throughout")]
    AllRest,
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("sequence has {seq} frames but song has {song} steps")]
    LengthMismatch { seq: usize, song: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub use_countdown: bool,
    pub use_beat_marker: bool,
    pub use_subbeat_marker: bool,
    pub beats_per_bar: usize,
    pub steps_per_beat: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::NONE
    }
}

impl FeatureConfig {
    pub const NONE: FeatureConfig = FeatureConfig {
        use_countdown: false,
        use_beat_marker: false,
        use_subbeat_marker: false,
        beats_per_bar: 4,
        steps_per_beat: 4,
    };

    pub fn countdown() -> Self {
        Self {
            use_countdown: true,
            ..Self::NONE
        }
    }

    pub fn beat_marker() -> Self {
        Self {
            use_beat_marker: true,
            ..Self::NONE
        }
    }

    pub fn countdown_and_beat() -> Self {
        Self {
            use_countdown: true,
            use_beat_marker: true,
            ..Self::NONE
        }
    }

    pub fn bar_len(&self) -> usize {
        self.beats_per_bar * self.steps_per_beat
    }

    pub fn marker_width(&self) -> usize {
        usize::from(self.use_subbeat_marker) * self.steps_per_beat
            + usize::from(self.use_beat_marker) * self.beats_per_bar
    }

    pub fn width(&self) -> usize {
        usize::from(self.use_countdown) + self.marker_width()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.beats_per_bar == 0 || self.steps_per_beat == 0 {
            return Err(FeatureError::InvalidConfig(
                "beats_per_bar and steps_per_beat must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// First frame of the final contiguous run of sounding melody frames.
pub fn last_note_onset(song: &QuantizedSong) -> Result<usize, FeatureError> {
    let last = song
        .steps
        .iter()
        .rposition(|s| s.melody.is_some())
        .ok_or(FeatureError::AllRest)?;
    let start = song.steps[..last]
        .iter()
        .rposition(|s| s.melody.is_none())
        .map_or(0, |i| i + 1);
    Ok(start)
}

/// `(t_last - t) / t_last` up to `t_last`, zero afterwards.
pub fn countdown(total: usize, t_last: usize) -> Vec<f32> {
    (0..total).map(|t| countdown_at(t, t_last)).collect()
}

/// One value of [`countdown`].
pub fn countdown_at(t: usize, t_last: usize) -> f32 {
    if t_last == 0 || t >= t_last {
        0.0
    } else {
        (t_last - t) as f32 / t_last as f32
    }
}

/// Pickup length before the first downbeat, taken as `total mod bar_len`.
pub fn detect_anacrusis(total: usize, bar_len: usize) -> usize {
    assert!(bar_len >= 1, "bar length must be positive");
    total % bar_len
}

/// `T x W` marker block; rows before the anacrusis are all zero.
pub fn meter_markers(total: usize, anacrusis: usize, cfg: &FeatureConfig) -> Array2<f32> {
    let mut out = Array2::zeros((total, cfg.marker_width()));
    for t in anacrusis..total {
        fill_markers(
            out.row_mut(t).as_slice_mut().expect("row is contiguous"),
            t - anacrusis,
            cfg,
        );
    }
    out
}

pub(crate) fn fill_markers(row: &mut [f32], since_downbeat: usize, cfg: &FeatureConfig) {
    let mut offset = 0;
    if cfg.use_subbeat_marker {
        row[offset + since_downbeat % cfg.steps_per_beat] = 1.0;
        offset += cfg.steps_per_beat;
    }
    if cfg.use_beat_marker {
        row[offset + (since_downbeat / cfg.steps_per_beat) % cfg.beats_per_bar] = 1.0;
    }
}

/// Feature columns for a song of `total` steps with the given landmarks.
pub fn feature_block(total: usize, t_last: usize, anacrusis: usize, cfg: &FeatureConfig) -> Array2<f32> {
    let mut block = Array2::zeros((total, cfg.width()));
    if cfg.use_countdown {
        for (t, v) in countdown(total, t_last).into_iter().enumerate() {
            block[[t, 0]] = v;
        }
    }
    if cfg.marker_width() > 0 {
        let start = usize::from(cfg.use_countdown);
        block
            .slice_mut(s![.., start..])
            .assign(&meter_markers(total, anacrusis, cfg));
    }
    block
}

/// An encoded sequence with structure features appended.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub sequence: EncodedSequence,
    pub anacrusis_offset: usize,
}

/// Appends the configured feature columns to `seq`. Base columns, classes and
/// mask are untouched; frames with `mask = false` get zero features.
pub fn augment(
    seq: &EncodedSequence,
    song: &QuantizedSong,
    cfg: &FeatureConfig,
) -> Result<AugmentedSequence, FeatureError> {
    cfg.validate()?;
    let total = song.len();
    let real = seq.mask.iter().filter(|&&m| m).count();
    if real != total || seq.len() < total {
        return Err(FeatureError::LengthMismatch { seq: real, song: total });
    }
    if cfg.width() == 0 {
        return Ok(AugmentedSequence {
            sequence: seq.clone(),
            anacrusis_offset: 0,
        });
    }
    let t_last = if cfg.use_countdown { last_note_onset(song)? } else { 0 };
    let anacrusis = detect_anacrusis(total, cfg.bar_len());
    let mut extra = Array2::zeros((seq.len(), cfg.width()));
    extra
        .slice_mut(s![..total, ..])
        .assign(&feature_block(total, t_last, anacrusis, cfg));
    let frames = concatenate(Axis(1), &[seq.frames.view(), extra.view()]).expect("row counts agree");
    Ok(AugmentedSequence {
        sequence: EncodedSequence {
            frames,
            feature_dim: seq.feature_dim + cfg.width(),
            ..seq.clone()
        },
        anacrusis_offset: anacrusis,
    })
}

use rayon::prelude::*;

use super::split::Split;
use super::TrainError;
use crate::corpus::{load_score, CorpusEntry, SkipRecord};
use crate::encoding::{encode_song, quantize_with, EncodedSequence, QuantizedSong, TrackSelection};
use crate::features::{augment, FeatureConfig};
use crate::harmony::ChordDictionary;

/// Encoded train and validation sets sharing one chord dictionary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dictionary: ChordDictionary,
    pub features: FeatureConfig,
    pub train: Vec<EncodedSequence>,
    pub valid: Vec<EncodedSequence>,
    /// `(title, reason)` for songs that could not be encoded.
    pub skipped: Vec<(String, String)>,
}

impl PreparedData {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(
            crate::encoding::MELODY_CLASSES + self.dictionary.len() + self.features.width(),
            |s| s.dim(),
        )
    }
}

fn quantize_entries(entries: &[CorpusEntry], tracks: &TrackSelection) -> (Vec<QuantizedSong>, Vec<SkipRecord>) {
    let results: Vec<Result<QuantizedSong, SkipRecord>> = entries
        .par_iter()
        .map(|e| {
            let skip = |reason: String| SkipRecord {
                path: e.path.clone(),
                reason,
            };
            let score = load_score(&e.path).map_err(|err| skip(err.to_string()))?;
            quantize_with(&score, tracks).map_err(|err| skip(err.to_string()))
        })
        .collect();
    let mut songs = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(s) => songs.push(s),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    (songs, skipped)
}

/// Training songs, validation songs and the pieces that were skipped.
pub type LoadedSplit = (Vec<QuantizedSong>, Vec<QuantizedSong>, Vec<SkipRecord>);

/// Parses and quantizes both halves of a split. Pieces that fail are skipped
/// with a warning and reported.
pub fn load_split(split: &Split, tracks: &TrackSelection) -> Result<LoadedSplit, TrainError> {
    let (train, mut skipped) = quantize_entries(&split.train, tracks);
    let (valid, more) = quantize_entries(&split.valid, tracks);
    skipped.extend(more);
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok((train, valid, skipped))
}

/// Builds the chord dictionary from `train` alone, then encodes and augments
/// both sets. Validation chords outside the dictionary map to the unknown
/// class.
pub fn prepare_data(
    train: &[QuantizedSong],
    valid: &[QuantizedSong],
    features: &FeatureConfig,
) -> Result<PreparedData, TrainError> {
    features.validate()?;
    let dictionary = ChordDictionary::build(train.iter().flat_map(|s| s.steps.iter().map(|st| &st.harmony)))?;
    let encode = |songs: &[QuantizedSong]| -> (Vec<EncodedSequence>, Vec<(String, String)>) {
        let results: Vec<_> = songs
            .par_iter()
            .map(|song| {
                let base = encode_song(song, &dictionary).map_err(|e| e.to_string())?;
                augment(&base, song, features)
                    .map(|a| a.sequence)
                    .map_err(|e| e.to_string())
            })
            .collect();
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        for (song, r) in songs.iter().zip(results) {
            match r {
                Ok(s) if s.len() >= 2 => ok.push(s),
                Ok(_) => bad.push((song.title.clone(), "shorter than two steps".to_string())),
                Err(e) => bad.push((song.title.clone(), e)),
            }
        }
        (ok, bad)
    };
    let (train_seqs, mut skipped) = encode(train);
    let (valid_seqs, more) = encode(valid);
    skipped.extend(more);
    for (title, reason) in &skipped {
        log::warn!("not encoded {title:?}: {reason}");
    }
    if train_seqs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(PreparedData {
        dictionary,
        features: *features,
        train: train_seqs,
        valid: valid_seqs,
        skipped,
    })
}

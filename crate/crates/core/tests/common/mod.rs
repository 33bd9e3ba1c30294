#![allow(dead_code)]

use tempfile::TempDir;
use tempostruct::corpus::{index_corpus, CorpusIndex};
use tempostruct::encoding::{QuantizedSong, TrackSelection};
use tempostruct::features::FeatureConfig;
use tempostruct::synthetic::write_corpus;
use tempostruct::training::{load_split, prepare_data, split_corpus, PreparedData, SplitSpec, TrainConfig};

pub fn corpus(per_style: usize, seed: u64) -> (TempDir, CorpusIndex) {
    let dir = TempDir::new().unwrap();
    write_corpus(dir.path(), per_style, seed).unwrap();
    let index = index_corpus(dir.path()).unwrap();
    (dir, index)
}

pub fn songs(index: &CorpusIndex) -> (Vec<QuantizedSong>, Vec<QuantizedSong>) {
    let split = split_corpus(index, &SplitSpec::default()).unwrap();
    let (train, valid, skipped) = load_split(&split, &TrackSelection::Auto).unwrap();
    assert!(skipped.is_empty(), "{skipped:?}");
    (train, valid)
}

pub fn prepared(index: &CorpusIndex, features: FeatureConfig) -> PreparedData {
    let (train, valid) = songs(index);
    prepare_data(&train, &valid, &features).unwrap()
}

/// A model small enough to train in seconds.
pub fn small_config(features: FeatureConfig) -> TrainConfig {
    TrainConfig {
        num_layers: 1,
        hidden_size: 24,
        dropout_keep: 1.0,
        features,
        batch_size: 8,
        chunk_len: 64,
        max_epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

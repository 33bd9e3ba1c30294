use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::{CorpusEntry, CorpusIndex};
use crate::midi::TimeSignature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Keep only pieces in this time signature.
    pub time_signature: Option<TimeSignature>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
            time_signature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<CorpusEntry>,
    pub valid: Vec<CorpusEntry>,
}

/// Positions of each stratum's entries, strata in label order.
fn strata(entries: &[CorpusEntry]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        map.entry(e.style_tag.as_str()).or_default().push(i);
    }
    map
}

/// Stratified split by style tag. Each stratum sends
/// `round(fraction * size)` seeded-random pieces to training (at least one
/// piece to each side); strata with fewer than two pieces go wholly to
/// training. Both lists keep corpus order.
pub fn split_corpus(index: &CorpusIndex, spec: &SplitSpec) -> Result<Split, TrainError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let entries: Vec<CorpusEntry> = index
        .entries
        .iter()
        .filter(|e| spec.time_signature.is_none_or(|ts| e.time_signature == ts))
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_train = vec![false; entries.len()];
    for (tag, mut members) in strata(&entries) {
        if members.len() < 2 {
            log::warn!("stratum {tag:?} has {} piece(s); all go to training", members.len());
            members.iter().for_each(|&i| in_train[i] = true);
            continue;
        }
        let n = members.len();
        let take = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        members[..take].iter().for_each(|&i| in_train[i] = true);
    }
    let (train, valid): (Vec<_>, Vec<_>) = entries.into_iter().zip(in_train).partition(|(_, t)| *t);
    Ok(Split {
        train: train.into_iter().map(|(e, _)| e).collect(),
        valid: valid.into_iter().map(|(e, _)| e).collect(),
    })
}

/// About `size` pieces drawn per stratum in proportion to stratum size, in
/// corpus order. Every non-empty stratum keeps at least one piece.
pub fn stratified_subset(index: &CorpusIndex, size: usize, seed: u64) -> CorpusIndex {
    if size >= index.len() {
        return CorpusIndex::from_entries(index.entries.clone());
    }
    let fraction = size as f64 / index.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; index.len()];
    for (_, mut members) in strata(&index.entries) {
        let take = ((fraction * members.len() as f64).round() as usize).max(1);
        members.shuffle(&mut rng);
        members.iter().take(take).for_each(|&i| keep[i] = true);
    }
    CorpusIndex::from_entries(
        index
            .entries
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(e, _)| e.clone())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn index(strata: &[(&str, usize, TimeSignature)]) -> CorpusIndex {
        let mut entries = Vec::new();
        for &(tag, n, ts) in strata {
            for i in 0..n {
                entries.push(CorpusEntry {
                    path: PathBuf::from(format!("{tag}{i}.mid")),
                    style_tag: tag.to_string(),
                    time_signature: ts,
                });
            }
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        CorpusIndex::from_entries(entries)
    }

    fn count(list: &[CorpusEntry], tag: &str) -> usize {
        list.iter().filter(|e| e.style_tag == tag).count()
    }

    #[test]
    fn seven_three_per_stratum() {
        let idx = index(&[
            ("jigs", 10, TimeSignature::COMMON),
            ("reels", 10, TimeSignature::COMMON),
        ]);
        let split = split_corpus(&idx, &SplitSpec::default()).unwrap();
        assert_eq!((count(&split.train, "jigs"), count(&split.valid, "jigs")), (7, 3));
        assert_eq!((count(&split.train, "reels"), count(&split.valid, "reels")), (7, 3));
    }

    #[test]
    fn singleton_stratum_goes_to_train() {
        let idx = index(&[
            ("jigs", 10, TimeSignature::COMMON),
            ("waltz", 1, TimeSignature::new(3, 4)),
        ]);
        let split = split_corpus(&idx, &SplitSpec::default()).unwrap();
        assert_eq!(count(&split.train, "waltz"), 1);
        assert_eq!(count(&split.valid, "waltz"), 0);
    }

    #[test]
    fn time_signature_filter() {
        let idx = index(&[
            ("jigs", 10, TimeSignature::new(6, 8)),
            ("reels", 10, TimeSignature::COMMON),
        ]);
        let spec = SplitSpec {
            time_signature: Some(TimeSignature::COMMON),
            ..SplitSpec::default()
        };
        let split = split_corpus(&idx, &spec).unwrap();
        assert_eq!(split.train.len() + split.valid.len(), 10);
        assert!(split.train.iter().chain(&split.valid).all(|e| e.style_tag == "reels"));
        let none = SplitSpec {
            time_signature: Some(TimeSignature::new(5, 4)),
            ..SplitSpec::default()
        };
        assert!(matches!(split_corpus(&idx, &none), Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn subset_is_proportional() {
        let idx = index(&[
            ("jigs", 300, TimeSignature::COMMON),
            ("reels", 100, TimeSignature::COMMON),
        ]);
        let sub = stratified_subset(&idx, 200, 1);
        assert_eq!(sub.counts["jigs"], 150);
        assert_eq!(sub.counts["reels"], 50);
        assert_eq!(sub, stratified_subset(&idx, 200, 1));
    }

    proptest! {
        #[test]
        fn split_properties(sizes in prop::collection::vec(1usize..40, 1..6), seed in any::<u64>()) {
            let tags = ["a", "b", "c", "d", "e", "f"];
            let spec: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| (tags[i], n, TimeSignature::COMMON)).collect();
            let idx = index(&spec);
            let s = SplitSpec { seed, ..SplitSpec::default() };
            let split = split_corpus(&idx, &s).unwrap();
            prop_assert_eq!(&split, &split_corpus(&idx, &s).unwrap());
            prop_assert_eq!(split.train.len() + split.valid.len(), idx.len());
            for e in &split.train {
                prop_assert!(!split.valid.contains(e));
            }
            for (i, &n) in sizes.iter().enumerate() {
                let t = count(&split.train, tags[i]) as f64;
                if n >= 2 {
                    prop_assert!((t - 0.7 * n as f64).abs() <= 1.0);
                } else {
                    prop_assert_eq!(t as usize, n);
                }
            }
        }
    }
}

//! Corpus directory indexing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{parse_midi, Score, TimeSignature};

/// Stratum label used when a filename has no alphabetic prefix.
pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no parseable MIDI files under {0}")]
    EmptyCorpus(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("bad manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub style_tag: String,
    pub time_signature: TimeSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub skipped: Vec<SkipRecord>,
}

/// Filename prefix before the first digit, trimmed of separators:
/// `jigs34.mid` gives `jigs`, `reels_simple_chords_7.mid` gives
/// `reels_simple_chords`.
pub fn style_tag_for(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prefix: String = stem.chars().take_while(|c| !c.is_ascii_digit()).collect();
    let tag = prefix.trim_end_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    if tag.is_empty() {
        UNTAGGED.to_string()
    } else {
        tag
    }
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// Reads and parses one file, tagging it with its stratum.
pub fn load_score(path: &Path) -> Result<Score, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut score = parse_midi(&bytes).map_err(|e| CorpusError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    score.style_tag = style_tag_for(path);
    if score.title.is_empty() {
        score.title = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(score)
}

/// Indexes every `.mid`/`.midi` file below `directory`. Files that fail to
/// parse, or carry no notes, land in the skip list.
pub fn index_corpus(directory: &Path) -> Result<CorpusIndex, CorpusError> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(directory)
        .into_iter()
        .map(|e| {
            e.map_err(|e| CorpusError::Io {
                path: directory.to_path_buf(),
                source: e.into(),
            })
        })
        .filter_map(|e| match e {
            Ok(e) if e.file_type().is_file() && is_midi(e.path()) => Some(Ok(e.into_path())),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_, _>>()?;
    paths.sort();

    let parsed: Vec<Result<CorpusEntry, SkipRecord>> = paths
        .par_iter()
        .map(|path| {
            let skip = |reason: String| SkipRecord {
                path: path.clone(),
                reason,
            };
            let score = load_score(path).map_err(|e| match e {
                CorpusError::Unreadable { reason, .. } => skip(reason),
                other => skip(other.to_string()),
            })?;
            if score.notes.is_empty() {
                return Err(skip("no notes".into()));
            }
            Ok(CorpusEntry {
                path: path.clone(),
                style_tag: score.style_tag,
                time_signature: score.time_signature,
            })
        })
        .collect();

    let mut index = CorpusIndex {
        entries: Vec::new(),
        counts: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for item in parsed {
        match item {
            Ok(entry) => {
                *index.counts.entry(entry.style_tag.clone()).or_default() += 1;
                index.entries.push(entry);
            }
            Err(skip) => index.skipped.push(skip),
        }
    }
    if index.entries.is_empty() {
        return Err(CorpusError::EmptyCorpus(directory.to_path_buf()));
    }
    Ok(index)
}

impl CorpusIndex {
    /// Rebuilds an index from a subset of entries, recounting strata.
    pub fn from_entries(entries: Vec<CorpusEntry>) -> Self {
        let mut counts = BTreeMap::new();
        for e in &entries {
            *counts.entry(e.style_tag.clone()).or_default() += 1;
        }
        Self {
            entries,
            counts,
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Skip report lines, `path<TAB>reason`.
    pub fn skip_report(&self) -> String {
        let mut out = String::new();
        for s in &self.skipped {
            let reason = s.reason.replace(['\t', '\n'], " ");
            let _ = writeln!(out, "{}\t{}", s.path.display(), reason);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    /// Parses every indexed file in parallel, preserving entry order.
    pub fn load_scores(&self) -> Result<Vec<Score>, CorpusError> {
        self.entries.par_iter().map(|e| load_score(&e.path)).collect()
    }
}

//! Major/minor triad classification and the corpus chord dictionary.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarmonyError {
    #[error("no frame in the corpus classifies as a major or minor triad")]
    NoChords,
    #[error("the unknown chord class has no pitches")]
    UnknownNotRealizable,
    #[error("bad chord label {0:?}")]
    BadLabel(String),
    #[error("duplicate chord label {0}")]
    Duplicate(ChordLabel),
    #[error("dictionary holds {0} triads, at most 24 exist")]
    TooLarge(usize),
}

/// A set of MIDI note numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PitchSet(u128);

impl PitchSet {
    pub const EMPTY: PitchSet = PitchSet(0);

    pub fn insert(&mut self, pitch: u8) {
        debug_assert!(pitch < 128);
        self.0 |= 1u128 << pitch;
    }

    pub fn contains(&self, pitch: u8) -> bool {
        pitch < 128 && self.0 & (1u128 << pitch) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0u8..128).filter(move |&p| self.contains(p))
    }

    /// 12-bit pitch-class mask.
    pub fn pitch_classes(&self) -> u16 {
        self.iter().fold(0u16, |m, p| m | 1 << (p % 12))
    }
}

impl FromIterator<u8> for PitchSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut set = PitchSet::EMPTY;
        for p in iter {
            set.insert(p);
        }
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quality {
    Major,
    Minor,
}

impl Quality {
    pub fn third(self) -> u8 {
        match self {
            Quality::Major => 4,
            Quality::Minor => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChordLabel {
    Triad { root: u8, quality: Quality },
    Unknown,
}

impl ChordLabel {
    pub fn triad(root: u8, quality: Quality) -> Self {
        ChordLabel::Triad {
            root: root % 12,
            quality,
        }
    }

    /// All 24 major and minor triads.
    pub fn all_triads() -> impl Iterator<Item = ChordLabel> {
        [Quality::Major, Quality::Minor]
            .into_iter()
            .flat_map(|q| (0..12).map(move |r| ChordLabel::triad(r, q)))
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordLabel::Triad { root, quality } => {
                let q = match quality {
                    Quality::Major => "maj",
                    Quality::Minor => "min",
                };
                write!(f, "{root}:{q}")
            }
            ChordLabel::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for ChordLabel {
    type Err = HarmonyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unknown" {
            return Ok(ChordLabel::Unknown);
        }
        let bad = || HarmonyError::BadLabel(s.to_string());
        let (pc, q) = s.split_once(':').ok_or_else(bad)?;
        let root: u8 = pc.parse().map_err(|_| bad())?;
        if root > 11 {
            return Err(bad());
        }
        let quality = match q {
            "maj" => Quality::Major,
            "min" => Quality::Minor,
            _ => return Err(bad()),
        };
        Ok(ChordLabel::Triad { root, quality })
    }
}

fn triad_mask(root: u8, quality: Quality) -> u16 {
    [0, quality.third(), 7]
        .iter()
        .fold(0u16, |m, i| m | 1 << ((root + i) % 12))
}

/// Exact template match of the sounding pitch classes against the 24 triads.
pub fn classify_chord(pitches: &PitchSet) -> ChordLabel {
    let mask = pitches.pitch_classes();
    if mask.count_ones() != 3 {
        return ChordLabel::Unknown;
    }
    ChordLabel::all_triads()
        .find(|l| match *l {
            ChordLabel::Triad { root, quality } => triad_mask(root, quality) == mask,
            ChordLabel::Unknown => false,
        })
        .unwrap_or(ChordLabel::Unknown)
}

/// Root-position voicing with the root at `12 * (register + 1) + root`.
pub fn realize_chord(label: ChordLabel, register: u8) -> Result<PitchSet, HarmonyError> {
    match label {
        ChordLabel::Triad { root, quality } => {
            let base = 12 * (u16::from(register) + 1) + u16::from(root);
            let pitches = [0, u16::from(quality.third()), 7].map(|i| base + i);
            if pitches[2] > 127 {
                return Err(HarmonyError::BadLabel(format!("register {register} out of range")));
            }
            Ok(pitches.iter().map(|&p| p as u8).collect())
        }
        ChordLabel::Unknown => Err(HarmonyError::UnknownNotRealizable),
    }
}

/// Ordered triad classes observed in a corpus, with `Unknown` as the last class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordDictionary {
    labels: Vec<ChordLabel>,
    index: HashMap<ChordLabel, usize>,
}

impl ChordDictionary {
    /// Builds a dictionary from triad labels; `Unknown` is appended.
    pub fn from_triads(triads: Vec<ChordLabel>) -> Result<Self, HarmonyError> {
        let mut labels = Vec::with_capacity(triads.len() + 1);
        let mut index = HashMap::new();
        for l in triads {
            if l == ChordLabel::Unknown {
                return Err(HarmonyError::BadLabel("unknown".into()));
            }
            if index.insert(l, labels.len()).is_some() {
                return Err(HarmonyError::Duplicate(l));
            }
            labels.push(l);
        }
        if labels.len() > 24 {
            return Err(HarmonyError::TooLarge(labels.len()));
        }
        index.insert(ChordLabel::Unknown, labels.len());
        labels.push(ChordLabel::Unknown);
        Ok(Self { labels, index })
    }

    /// Distinct triads over all frames, ordered by first appearance.
    pub fn build<'a, I>(frames: I) -> Result<Self, HarmonyError>
    where
        I: IntoIterator<Item = &'a PitchSet>,
    {
        let mut seen = Vec::new();
        let mut cache: HashMap<u16, ChordLabel> = HashMap::new();
        for pitches in frames {
            let label = *cache
                .entry(pitches.pitch_classes())
                .or_insert_with(|| classify_chord(pitches));
            if label != ChordLabel::Unknown && !seen.contains(&label) {
                seen.push(label);
            }
        }
        if seen.is_empty() {
            return Err(HarmonyError::NoChords);
        }
        Self::from_triads(seen)
    }

    /// Number of classes, including `Unknown`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unknown_index(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn labels(&self) -> &[ChordLabel] {
        &self.labels
    }

    pub fn label(&self, class: usize) -> Option<ChordLabel> {
        self.labels.get(class).copied()
    }

    /// Class index; triads missing from the dictionary map to `Unknown`.
    pub fn index_of(&self, label: ChordLabel) -> usize {
        self.index.get(&label).copied().unwrap_or_else(|| self.unknown_index())
    }

    pub fn class_of(&self, pitches: &PitchSet) -> usize {
        self.index_of(classify_chord(pitches))
    }

    /// `"PC:QUALITY"` strings for the triad classes; `Unknown` is implied last.
    pub fn to_strings(&self) -> Vec<String> {
        self.labels[..self.unknown_index()]
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    pub fn from_strings<S: AsRef<str>>(items: &[S]) -> Result<Self, HarmonyError> {
        let triads = items
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_triads(triads)
    }
}

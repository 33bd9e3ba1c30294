//! Small generated folk-like tunes (melody over block triads) for tests and
//! demos when no real corpus is at hand.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harmony::{realize_chord, ChordLabel, Quality};
use crate::midi::{write_midi, NoteEvent, Score, TimeSignature};

pub const TICKS_PER_QUARTER: u16 = 480;
const STEP: u64 = TICKS_PER_QUARTER as u64 / 4;

/// Style tags with their meters.
pub const STYLES: [(&str, TimeSignature); 4] = [
    ("reels", TimeSignature::COMMON),
    ("hornpipes", TimeSignature::COMMON),
    (
        "jigs",
        TimeSignature {
            numerator: 6,
            denominator: 8,
        },
    ),
    (
        "waltzes",
        TimeSignature {
            numerator: 3,
            denominator: 4,
        },
    ),
];

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

/// Diatonic triads as (scale degree offset in semitones, quality).
const DEGREES: [(u8, Quality); 5] = [
    (0, Quality::Major),
    (5, Quality::Major),
    (7, Quality::Major),
    (9, Quality::Minor),
    (2, Quality::Minor),
];

/// One tune: track 0 melody, track 1 held triads, an optional one-beat pickup
/// and a cadence onto a held tonic.
pub fn synthetic_tune(style: &str, time_signature: TimeSignature, seed: u64) -> Score {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bar_steps = u64::from(time_signature.numerator) * 16 / u64::from(time_signature.denominator);
    let beat_steps = if time_signature.denominator == 8 { 6 } else { 4 };
    let key: u8 = rng.random_range(0..12);
    let bars: u64 = [8, 12, 16][rng.random_range(0..3)];
    let pickup: u64 = if rng.random_bool(0.5) { beat_steps } else { 0 };

    let scale: Vec<u8> = (60u8..=84)
        .filter(|p| MAJOR_SCALE.contains(&((p + 12 - key % 12) % 12)))
        .collect();
    let mut score = Score::new(TICKS_PER_QUARTER, time_signature);
    score.title = format!("{style} {seed}");
    let mut pos = scale.len() / 2;

    let mut melody_run =
        |score: &mut Score, start: u64, len: u64, rng: &mut ChaCha8Rng, chord: Option<(u8, Quality)>| {
            let mut t = start;
            while t < start + len {
                let dur = if rng.random_bool(0.7) { 2 } else { 4 }.min(start + len - t);
                let step: i64 = rng.random_range(-2..=2);
                pos = (pos as i64 + step).clamp(0, scale.len() as i64 - 1) as usize;
                if let Some((root, quality)) = chord {
                    // Lean towards chord tones on strong steps.
                    if t.is_multiple_of(beat_steps) {
                        let tones = [root, root + quality.third(), root + 7].map(|x| (x + key) % 12);
                        if let Some(i) = (0..scale.len())
                            .filter(|&i| tones.contains(&(scale[i] % 12)))
                            .min_by_key(|&i| i.abs_diff(pos))
                        {
                            pos = i;
                        }
                    }
                }
                if !rng.random_bool(0.08) {
                    score.notes.push(NoteEvent::new(scale[pos], t * STEP, dur * STEP, 0));
                }
                t += dur;
            }
        };

    if pickup > 0 {
        melody_run(&mut score, 0, pickup, &mut rng, None);
    }
    for bar in 0..bars {
        let start = pickup + bar * bar_steps;
        let degree = if bar == bars - 1 {
            DEGREES[0]
        } else if bar == bars - 2 {
            DEGREES[2]
        } else if bar % 4 == 0 {
            DEGREES[0]
        } else {
            DEGREES[rng.random_range(0..DEGREES.len())]
        };
        let label = ChordLabel::triad((key + degree.0) % 12, degree.1);
        for p in realize_chord(label, 3).expect("octave 3 fits").iter() {
            score.notes.push(NoteEvent::new(p, start * STEP, bar_steps * STEP, 1));
        }
        if bar == bars - 1 {
            let tonic = scale
                .iter()
                .copied()
                .find(|p| p % 12 == key && *p >= 67)
                .unwrap_or(scale[0]);
            score
                .notes
                .push(NoteEvent::new(tonic, start * STEP, bar_steps * STEP, 0));
        } else {
            melody_run(&mut score, start, bar_steps, &mut rng, Some(degree));
        }
    }
    score.sort_notes();
    score
}

/// Writes `per_style` tunes of every style as `{style}{n}.mid` into `dir`.
pub fn write_corpus(dir: &Path, per_style: usize, seed: u64) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (s, (style, ts)) in STYLES.iter().enumerate() {
        for n in 0..per_style {
            let tune_seed = seed.wrapping_mul(1_000_003).wrapping_add((s * 10_000 + n) as u64);
            let path = dir.join(format!("{style}{n}.mid"));
            std::fs::write(&path, write_midi(&synthetic_tune(style, *ts, tune_seed)))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

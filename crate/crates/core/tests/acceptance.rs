//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Criteria that need the real folk corpus read it from `TEMPOSTRUCT_DATA`;
//! without it they print NOT RUN. `TEMPOSTRUCT_TABLE1=1` runs the full
//! loss-table reproduction instead of the 200-song ordering check.

mod common;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tempostruct::checkpoint::Checkpoint;
use tempostruct::config::DATA_ENV;
use tempostruct::corpus::{index_corpus, CorpusIndex};
use tempostruct::encoding::{
    decode_sequence, encode_song, quantize_with, PaddingMode, QuantizedSong, Step, TrackSelection,
};
use tempostruct::experiment::Experiment;
use tempostruct::features::{augment, countdown, detect_anacrusis, meter_markers, FeatureConfig};
use tempostruct::generation::{export, feature_generator, generate, harmony_stability, GenConfig};
use tempostruct::harmony::{classify_chord, ChordDictionary, PitchSet};
use tempostruct::midi::{write_midi, TimeSignature};
use tempostruct::nn::{
    dual_softmax_loss, grad_check, grad_check_fixture, head_cross_entropy, LossConfig, GRAD_CHECK_TOLERANCE,
};
use tempostruct::training::{
    load_split, prepare_data, run_epochs, split_corpus, stratified_subset, train_prepared, EpochRunner, SplitSpec,
    TrainConfig, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    NotRun,
    Report,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotRun => "NOT RUN",
            Status::Report => "REPORT",
        })
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn corpus_root() -> Option<std::path::PathBuf> {
    std::env::var_os(DATA_ENV)
        .map(Into::into)
        .filter(|p: &std::path::PathBuf| p.is_dir())
}

// 1. Gradient oracle.
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for layers in [1, 2] {
        for seed in [11, 12] {
            let (params, batch) = grad_check_fixture(layers, seed);
            let report = grad_check(&params, &batch, &LossConfig::default(), seed).expect("grad check runs");
            worst = worst.max(report.max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass_if(
        worst < GRAD_CHECK_TOLERANCE && secs < 60.0,
        format!("max relative error {worst:.2e} (< 1e-4) over 1- and 2-layer hidden-8 models, {secs:.1}s (< 60s)"),
    )
}

// 2. Loss unit values.
fn loss_unit() -> Outcome {
    let (m, h) = (35, 23);
    let zeros = Array3::<f64>::zeros((4, 3, m + h));
    let t = Array2::<usize>::zeros((4, 3));
    let mask = Array2::from_elem((4, 3), true);
    let uniform = dual_softmax_loss(zeros.view(), t.view(), t.view(), mask.view(), m, &LossConfig::default())
        .expect("loss")
        .loss;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Array3::from_shape_simple_fn((6, 4, m + h), || rng.random_range(-5.0..5.0));
    let mt = Array2::from_shape_simple_fn((6, 4), || rng.random_range(0..m));
    let ht = Array2::from_shape_simple_fn((6, 4), || rng.random_range(0..h));
    let mask = Array2::from_shape_simple_fn((6, 4), || rng.random_bool(0.8));
    let only = |alpha| {
        dual_softmax_loss(
            logits.view(),
            mt.view(),
            ht.view(),
            mask.view(),
            m,
            &LossConfig { alpha },
        )
        .expect("loss")
        .loss
    };
    let melody = head_cross_entropy(logits.view(), mt.view(), mask.view(), 0..m);
    let harmony = head_cross_entropy(logits.view(), ht.view(), mask.view(), m..m + h);
    let d1 = (only(1.0) - melody).abs();
    let d0 = (only(0.0) - harmony).abs();
    pass_if(
        (uniform - 3.3454).abs() < 1e-3 && d1 < 1e-12 && d0 < 1e-12,
        format!("uniform loss {uniform:.5} (3.3454 +/- 1e-3); alpha=1 vs melody CE {d1:.1e}, alpha=0 vs harmony CE {d0:.1e}"),
    )
}

/// Checks every quantizable piece of `index`: one-hot validity, exact melody
/// and chord-label round-trip. Returns (pieces, frames, problems, skipped).
fn round_trip(index: &CorpusIndex) -> (usize, usize, Vec<String>, usize) {
    let mut songs: Vec<QuantizedSong> = Vec::new();
    let mut skipped = 0;
    for entry in &index.entries {
        match tempostruct::corpus::load_score(&entry.path)
            .map_err(|e| e.to_string())
            .and_then(|s| quantize_with(&s, &TrackSelection::Auto).map_err(|e| e.to_string()))
        {
            Ok(song) => songs.push(song),
            Err(_) => skipped += 1,
        }
    }
    let dict = ChordDictionary::build(songs.iter().flat_map(|s| s.steps.iter().map(|st| &st.harmony)))
        .expect("corpus has chords");
    let mut problems = Vec::new();
    let mut frames = 0;
    for song in &songs {
        let seq = encode_song(song, &dict).expect("encodable");
        if let Err(e) = seq.validate() {
            problems.push(format!("{}: {e}", song.title));
            continue;
        }
        frames += seq.mask.iter().filter(|&&m| m).count();
        let back = decode_sequence(&seq, &dict, 3).expect("decodable");
        if back.melody() != song.melody() {
            problems.push(format!("{}: melody differs", song.title));
        }
        let labels = |s: &QuantizedSong| s.steps.iter().map(|st| classify_chord(&st.harmony)).collect::<Vec<_>>();
        if labels(&back) != labels(song) {
            problems.push(format!("{}: chord labels differ", song.title));
        }
    }
    (songs.len(), frames, problems, skipped)
}

// 3. Encoding round-trip.
fn encoding_round_trip() -> Outcome {
    if let Some(root) = corpus_root() {
        let index = match index_corpus(&root) {
            Ok(i) => i,
            Err(e) => return pass_if(false, format!("cannot index {}: {e}", root.display())),
        };
        let (n, frames, problems, skipped) = round_trip(&index);
        return pass_if(
            problems.is_empty(),
            format!(
                "{n} pieces, {frames} frames, {} problems, {skipped} unquantizable, {} unparseable{}",
                problems.len(),
                index.skipped.len(),
                problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
            ),
        );
    }
    let (_dir, index) = common::corpus(40, 7);
    let (n, frames, problems, _) = round_trip(&index);
    let stand_in = if problems.is_empty() { "passed" } else { "FAILED" };
    Outcome {
        status: if problems.is_empty() { Status::NotRun } else { Status::Fail },
        detail: format!(
            "needs the folk corpus in ${DATA_ENV}; synthetic stand-in {stand_in} ({n} pieces, {frames} frames, {} problems)",
            problems.len()
        ),
    }
}

// 4. Feature invariants.
fn feature_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for _ in 0..1000 {
        let total = rng.random_range(2..2000);
        let t_last = rng.random_range(1..total);
        let c = countdown(total, t_last);
        if c[0] != 1.0 || c[t_last] != 0.0 || c.windows(2).any(|w| w[1] > w[0]) {
            bad.push(format!("countdown T={total} t_last={t_last}"));
        }
    }
    let cfg = FeatureConfig {
        use_subbeat_marker: true,
        ..FeatureConfig::countdown_and_beat()
    };
    for _ in 0..1000 {
        let total = rng.random_range(1..1000);
        let a = detect_anacrusis(total, 16);
        if a != total % 16 {
            bad.push(format!("anacrusis T={total}"));
        }
        let markers = meter_markers(total, a, &cfg);
        let zero_before = (0..a).all(|t| markers.row(t).iter().all(|&v| v == 0.0));
        let periodic = (a..total.saturating_sub(16)).all(|t| markers.row(t) == markers.row(t + 16));
        let downbeat = a >= total || (markers[[a, 0]] == 1.0 && markers[[a, 4]] == 1.0);
        if !(zero_before && periodic && downbeat) {
            bad.push(format!("markers T={total}"));
        }
    }
    pass_if(
        bad.is_empty(),
        format!(
            "1000 countdown pairs and 1000 marker lengths, {} violations{}",
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

/// Trains one preset on a shared split and returns its best validation loss.
fn train_experiment(index: &CorpusIndex, experiment: Experiment, max_epochs: usize) -> Result<f64, TrainError> {
    let spec = SplitSpec {
        time_signature: experiment.time_signature_filter(),
        ..SplitSpec::default()
    };
    let split = split_corpus(index, &spec)?;
    let (train, valid, _) = load_split(&split, &TrackSelection::Auto)?;
    let config = TrainConfig {
        padding: PaddingMode::Supervised,
        max_epochs,
        ..TrainConfig::for_experiment(experiment)
    };
    let data = prepare_data(&train, &valid, &config.features)?;
    Ok(train_prepared(&config, &data, None)?.record.best_valid_loss)
}

// 5. Loss table reproduction and feature ordering.
fn table_reproduction() -> Outcome {
    let Some(root) = corpus_root() else {
        return Outcome {
            status: Status::NotRun,
            detail: format!("needs the folk corpus in ${DATA_ENV}"),
        };
    };
    let index = match index_corpus(&root) {
        Ok(i) => i,
        Err(e) => return pass_if(false, format!("cannot index {}: {e}", root.display())),
    };
    let full = std::env::var_os("TEMPOSTRUCT_TABLE1").is_some();
    let (index, experiments): (CorpusIndex, &[Experiment]) = if full {
        (index, &Experiment::ALL)
    } else {
        (
            stratified_subset(&index, 200, 0),
            &[Experiment::Baseline, Experiment::Countdown, Experiment::Combined],
        )
    };
    let mut losses = Vec::new();
    for &e in experiments {
        match train_experiment(&index, e, 200) {
            Ok(l) => losses.push((e, l)),
            Err(err) => return pass_if(false, format!("{e} failed: {err}")),
        }
    }
    let get = |e: Experiment| losses.iter().find(|(x, _)| *x == e).map(|(_, l)| *l).unwrap();
    let bl = get(Experiment::Baseline);
    let ordered = get(Experiment::Countdown) < bl && get(Experiment::Combined) < bl;
    let within = !full || losses.iter().all(|(e, l)| (l - e.reference().valid_loss).abs() <= 0.05);
    let table: Vec<String> = losses
        .iter()
        .map(|(e, l)| format!("{e} {l:.5} (ref {:.5})", e.reference().valid_loss))
        .collect();
    let scope = if full {
        "full corpus"
    } else {
        "200-song subset, tolerance waived"
    };
    pass_if(
        ordered && within,
        format!("{scope}: {}; CD < BL and FC < BL: {ordered}", table.join(", ")),
    )
}

// 6. Early stopping.
struct Trace(Vec<f64>);

impl EpochRunner for Trace {
    fn train_epoch(&mut self, _: usize) -> Result<f64, TrainError> {
        Ok(0.0)
    }

    fn validate(&mut self) -> Result<f64, TrainError> {
        Ok(if self.0.is_empty() { 10.0 } else { self.0.remove(0) })
    }
}

fn early_stopping() -> Outcome {
    let mut trace = vec![1.0, 0.9];
    trace.extend((0..15).map(|i| 0.9 + 0.01 * (i % 3) as f64));
    trace.push(0.1);
    let rec = run_epochs(&mut Trace(trace), 1000, 15).expect("trace runs");
    let mut ok = rec.stop_epoch == 17 && rec.best_epoch == 2;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.random_range(1..120);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let rec = run_epochs(&mut Trace(losses), n, 15).expect("trace runs");
        ok &= rec.best_valid_loss <= min || rec.stopped_early;
        ok &= !rec.stopped_early || rec.stop_epoch == rec.best_epoch + 15;
        ok &= rec.stop_epoch <= rec.best_epoch + 15;
    }
    pass_if(
        ok,
        format!(
            "stagnating trace stopped at epoch {} with best epoch {} (expected 17 and 2); 200 random traces respect best + 15",
            rec.stop_epoch, rec.best_epoch
        ),
    )
}

/// A small combined-feature model trained on a synthetic corpus.
fn small_model() -> (Checkpoint, Vec<f64>) {
    let (_dir, index) = common::corpus(10, 8);
    let features = FeatureConfig::countdown_and_beat();
    let data = common::prepared(&index, features);
    let config = TrainConfig {
        hidden_size: 32,
        max_epochs: 5,
        ..common::small_config(features)
    };
    let outcome = train_prepared(&config, &data, None).expect("small model trains");
    let reference: Vec<f64> = data.valid.iter().filter_map(harmony_stability).collect();
    (outcome.checkpoint, reference)
}

fn parity_song(length: usize) -> QuantizedSong {
    let mut steps = vec![
        Step {
            melody: None,
            harmony: PitchSet::EMPTY,
        };
        length
    ];
    steps[0].melody = Some(67);
    steps[length - 1].melody = Some(72);
    QuantizedSong {
        steps,
        time_signature: TimeSignature::COMMON,
        style_tag: String::new(),
        title: String::new(),
    }
}

// 7. Generation contract.
fn generation_contract(ckpt: &Checkpoint) -> Outcome {
    let ckpt = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("checkpoint reloads");
    let dict = ckpt.dictionary().expect("dictionary");
    let gcfg = GenConfig {
        seed: 7,
        ..GenConfig::default()
    };
    let seq = generate(&ckpt, &gcfg, None).expect("generates");
    let frames = seq.len();
    let valid = seq.validate().is_ok() && decode_sequence(&seq, &dict, gcfg.register).is_ok();

    let song = parity_song(gcfg.length);
    let base = encode_song(&song, &dict).expect("encodes");
    let aug = augment(&base, &song, &ckpt.meta.features).expect("augments").sequence;
    let parity = (0..gcfg.length).all(|t| {
        let train: Vec<u32> = aug.frames.row(t).iter().skip(base.dim()).map(|v| v.to_bits()).collect();
        let gen: Vec<u32> = feature_generator(t, &gcfg, &ckpt.meta.features)
            .iter()
            .map(|v| v.to_bits())
            .collect();
        train == gen
    }) && (0..gcfg.length).all(|t| {
        seq.frames
            .row(t)
            .iter()
            .skip(base.dim())
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
            == feature_generator(t, &gcfg, &ckpt.meta.features)
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
    });

    let midi = |s| write_midi(&export(&s, &dict, &gcfg).expect("exports"));
    let first = midi(seq);
    let second = midi(generate(&ckpt, &gcfg, None).expect("generates"));
    let identical = first == second;
    pass_if(
        frames == 384 && valid && parity && identical,
        format!(
            "{frames} frames (384), one-hot valid: {valid}, feature parity bit-exact: {parity}, repeated seed byte-identical: {identical} ({} bytes)",
            first.len()
        ),
    )
}

// 8. Structure proxy, reported only.
fn structure_proxy(ckpt: &Checkpoint, reference: &[f64]) -> Outcome {
    let stats: Vec<f64> = (0..8)
        .filter_map(|seed| {
            let gcfg = GenConfig {
                seed,
                ..GenConfig::default()
            };
            generate(ckpt, &gcfg, None).ok().as_ref().and_then(harmony_stability)
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Outcome {
        status: Status::Report,
        detail: format!(
            "listening study not reproducible; bars with at most one chord change: generated {:.3} over {} samples, validation tunes {:.3} (synthetic corpus, small model)",
            mean(&stats),
            stats.len(),
            mean(reference)
        ),
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            pass_if(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let model = catch_unwind(small_model).ok();
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient oracle", guarded(gradient_oracle)),
        ("loss unit", guarded(loss_unit)),
        ("encoding round-trip", guarded(encoding_round_trip)),
        ("feature invariants", guarded(feature_invariants)),
        ("loss table and feature ordering", guarded(table_reproduction)),
        ("early stopping", guarded(early_stopping)),
        (
            "generation contract",
            guarded(|| match &model {
                Some((ckpt, _)) => generation_contract(ckpt),
                None => pass_if(false, "could not train the test model".into()),
            }),
        ),
        (
            "structure proxy",
            guarded(|| match &model {
                Some((ckpt, reference)) => structure_proxy(ckpt, reference),
                None => pass_if(false, "could not train the test model".into()),
            }),
        ),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        println!("criterion {} [{}] {name}: {}", i + 1, outcome.status, outcome.detail);
        failed += usize::from(outcome.status == Status::Fail);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

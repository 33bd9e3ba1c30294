//! `tempostruct` command-line driver.
//!
//! Exit codes: 0 ok, 1 other failure (including a failed gradient check),
//! 2 corpus problem, 3 diverged training, 4 checkpoint/config mismatch,
//! 64 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use tempostruct::checkpoint::Checkpoint;
use tempostruct::config::{ConfigError, ResolvedConfig, RunConfigFile, DATA_ENV};
use tempostruct::corpus::{index_corpus, load_score, CorpusError, CorpusIndex};
use tempostruct::encoding::{encode_song, pad_and_batch_with, quantize_with};
use tempostruct::experiment::Experiment;
use tempostruct::features::augment;
use tempostruct::generation::{export, generate, prime_from_sequence, GenError};
use tempostruct::midi::write_midi;
use tempostruct::nn::{grad_check, grad_check_fixture, grad_check_with, LossConfig, GRAD_CHECK_TOLERANCE};
use tempostruct::training::{
    evaluate, grid_search, load_split, prepare_data, split_corpus, stratified_subset, train_prepared, PreparedData,
    TrainError, CHECKPOINT_FILE,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CORPUS: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_USAGE: u8 = 64;

/// File the resolved configuration is echoed to in every run directory.
const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(
    name = "tempostruct",
    version,
    about = "Melody and harmony LSTM with temporal structure features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment preset: BL, CD, MM, FC or 4/4.
    #[arg(long)]
    experiment: Option<Experiment>,
    /// Seed for training and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Index a MIDI corpus and write manifest.json and skipped.tsv.
    Ingest {
        /// Corpus directory.
        #[arg(env = DATA_ENV)]
        corpus: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one model with early stopping.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train every cell of the hyperparameter grid.
    GridSearch {
        #[command(flatten)]
        common: Common,
        /// Cells trained in parallel.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Sample a piece from a checkpoint and write it as MIDI.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Softmax temperature; 0 picks the most likely class.
        #[arg(long)]
        temperature: Option<f64>,
        /// Steps to generate.
        #[arg(long)]
        length: Option<usize>,
        /// Prime with the first K steps of a MIDI file, as PATH:K.
        #[arg(long)]
        prime: Option<String>,
        /// Also write the encoded frames as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Report the validation loss of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and numeric gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Perturb the analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            match t {
                TrainError::EmptyCorpus | TrainError::Corpus(_) => return EXIT_CORPUS,
                TrainError::DivergedLoss { .. } => return EXIT_DIVERGED,
                _ => {}
            }
        }
        if cause.downcast_ref::<CorpusError>().is_some() {
            return EXIT_CORPUS;
        }
        if let Some(GenError::ConfigMismatch(_)) = cause.downcast_ref::<GenError>() {
            return EXIT_MISMATCH;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_FAILURE
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Ingest { corpus, out } => ingest(&corpus, &out),
        Command::Train { common } => train(&common),
        Command::GridSearch { common, jobs } => grid(&common, jobs),
        Command::Generate {
            checkpoint,
            common,
            temperature,
            length,
            prime,
            csv,
        } => generate_cmd(&checkpoint, &common, temperature, length, prime.as_deref(), csv),
        Command::Evaluate { checkpoint, common } => evaluate_cmd(&checkpoint, &common),
        Command::Gradcheck { seed, inject_fault } => gradcheck(seed, inject_fault),
    }
}

fn ingest(corpus: &Path, out: &Path) -> Result<u8> {
    let index = index_corpus(corpus)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("manifest.json"), &index.to_json())?;
    write(&out.join("skipped.tsv"), &index.skip_report())?;
    println!("indexed {} pieces, skipped {}", index.len(), index.skipped.len());
    for (tag, n) in &index.counts {
        println!("  {tag}: {n}");
    }
    Ok(0)
}

/// The config file (if any) with presets and flags applied.
fn resolve(common: &Common) -> Result<(RunConfigFile, ResolvedConfig)> {
    let file = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let resolved = file.resolve(common.experiment, common.seed)?;
    Ok((file, resolved))
}

fn run_dir(common: &Common, cfg: &ResolvedConfig) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.label().replace('/', "")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_index(cfg: &ResolvedConfig) -> Result<CorpusIndex> {
    let index = if let Some(manifest) = &cfg.corpus.manifest {
        let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
        CorpusIndex::from_json(&text)?
    } else if let Some(root) = &cfg.corpus.root {
        index_corpus(root)?
    } else {
        return Err(TrainError::EmptyCorpus)
            .with_context(|| format!("no corpus: set corpus.root or corpus.manifest, or {DATA_ENV}"));
    };
    Ok(match cfg.corpus.subset {
        Some(n) => stratified_subset(&index, n, cfg.split.seed),
        None => index,
    })
}

fn load_data(cfg: &ResolvedConfig) -> Result<PreparedData> {
    let index = load_index(cfg)?;
    let split = split_corpus(&index, &cfg.split)?;
    let (train, valid, skipped) = load_split(&split, &cfg.tracks)?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let data = prepare_data(&train, &valid, &cfg.train.features)?;
    log::info!(
        "{} training and {} validation pieces, {} chord classes",
        data.train.len(),
        data.valid.len(),
        data.dictionary.len()
    );
    Ok(data)
}

/// Creates the run directory and echoes the resolved config into it.
fn start_run(common: &Common, cfg: &ResolvedConfig) -> Result<PathBuf> {
    let out = run_dir(common, cfg);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(CONFIG_ECHO), &cfg.to_toml())?;
    Ok(out)
}

fn train(common: &Common) -> Result<u8> {
    let (_, cfg) = resolve(common)?;
    let out = start_run(common, &cfg)?;
    let data = load_data(&cfg)?;
    let outcome = train_prepared(&cfg.train, &data, Some(&out))?;
    let r = &outcome.record;
    println!(
        "{}: best validation loss {:.5} at epoch {} of {}{}, {:.2}s per epoch",
        cfg.experiment,
        r.best_valid_loss,
        r.best_epoch,
        r.stop_epoch,
        if r.stopped_early { " (early stop)" } else { "" },
        r.mean_epoch_seconds()
    );
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(0)
}

fn grid(common: &Common, jobs: Option<usize>) -> Result<u8> {
    let (_, cfg) = resolve(common)?;
    let jobs = jobs.unwrap_or(cfg.jobs);
    if jobs == 0 {
        return Err(ConfigError::Invalid("--jobs must be at least 1".into()).into());
    }
    let out = start_run(common, &cfg)?;
    let data = load_data(&cfg)?;
    let report = grid_search(&cfg.grid, &cfg.train, &data, jobs, Some(&out))?;
    write(&out.join("grid.csv"), &report.to_csv())?;
    for run in report.failures() {
        if let Err(e) = &run.result {
            eprintln!("cell {} failed: {e}", run.cell.index);
        }
    }
    let Some(best) = report.best() else {
        eprintln!("error: every grid cell failed");
        return Ok(EXIT_DIVERGED);
    };
    let loss = best.result.as_ref().map(|r| r.best_valid_loss).unwrap_or(f64::NAN);
    println!(
        "{}: best cell layers {} hidden {} keep {} with validation loss {loss:.5}",
        cfg.experiment, best.cell.num_layers, best.cell.hidden_size, best.cell.dropout_keep
    );
    if let Some(ckpt) = &report.best_checkpoint {
        let path = out.join(CHECKPOINT_FILE);
        ckpt.save(&path)?;
        println!("checkpoint: {}", path.display());
    }
    Ok(0)
}

/// Rejects a checkpoint whose feature columns differ from the ones the
/// config or experiment flag asks for.
fn check_features(file: &RunConfigFile, common: &Common, ckpt: &Checkpoint) -> Result<()> {
    let wanted = file
        .features
        .or(common.experiment.or(file.experiment).map(|e| e.features()));
    if let Some(wanted) = wanted {
        if wanted != ckpt.meta.features {
            return Err(GenError::ConfigMismatch(format!(
                "checkpoint features {:?} differ from configured {:?}",
                ckpt.meta.features, wanted
            ))
            .into());
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_prime(spec: &str) -> Result<(PathBuf, usize)> {
    let (path, k) = spec
        .rsplit_once(':')
        .ok_or_else(|| ConfigError::Invalid(format!("--prime {spec:?} is not PATH:K")))?;
    let k = k
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("--prime step count {k:?} is not a number")))?;
    Ok((PathBuf::from(path), k))
}

fn generate_cmd(
    checkpoint: &Path,
    common: &Common,
    temperature: Option<f64>,
    length: Option<usize>,
    prime: Option<&str>,
    csv: bool,
) -> Result<u8> {
    let (file, cfg) = resolve(common)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_features(&file, common, &ckpt)?;
    let dict = ckpt.dictionary()?;
    let mut gcfg = cfg.generation.clone();
    if let Some(t) = temperature {
        gcfg.temperature = t;
    }
    if let Some(n) = length {
        gcfg.length = n;
    }
    gcfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let prime_frames = match prime {
        Some(spec) => {
            let (path, k) = parse_prime(spec)?;
            let song = quantize_with(&load_score(&path)?, &cfg.tracks)?;
            let seq = encode_song(&song, &dict)?;
            Some(prime_from_sequence(&seq, k))
        }
        None => None,
    };
    let seq = generate(&ckpt, &gcfg, prime_frames.as_deref())?;
    let score = export(&seq, &dict, &gcfg)?;

    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    let name = format!("{stem}-{}", gcfg.seed);
    let midi_path = out.join(format!("{name}.mid"));
    fs::write(&midi_path, write_midi(&score)).with_context(|| format!("writing {}", midi_path.display()))?;
    if csv {
        let csv_path = out.join(format!("{name}.csv"));
        let f = fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
        seq.write_csv(std::io::BufWriter::new(f))
            .with_context(|| format!("writing {}", csv_path.display()))?;
    }
    println!(
        "seed {}: wrote {} ({} steps)",
        gcfg.seed,
        midi_path.display(),
        seq.len()
    );
    Ok(0)
}

fn evaluate_cmd(checkpoint: &Path, common: &Common) -> Result<u8> {
    let (file, cfg) = resolve(common)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_features(&file, common, &ckpt)?;
    let dict = ckpt.dictionary()?;
    let index = load_index(&cfg)?;
    let split = split_corpus(&index, &cfg.split)?;
    let (_, valid, _) = load_split(&split, &cfg.tracks)?;
    let mut seqs = Vec::new();
    for song in &valid {
        let base = encode_song(song, &dict)?;
        let seq = augment(&base, song, &ckpt.meta.features)?.sequence;
        if seq.len() >= 2 {
            seqs.push(seq);
        }
    }
    if seqs.is_empty() {
        return Err(TrainError::EmptyCorpus).context("validation split is empty");
    }
    let expected = ckpt.params.shape.input_dim;
    if seqs[0].dim() != expected {
        return Err(GenError::ConfigMismatch(format!(
            "encoded width {} but the model expects {expected}",
            seqs[0].dim()
        ))
        .into());
    }
    let batches = pad_and_batch_with(&seqs, cfg.train.chunk_len, cfg.train.batch_size, cfg.train.padding)?;
    let loss = evaluate(&ckpt.params, &batches, &cfg.train.loss)?;
    println!("validation loss {loss:.5} over {} pieces", seqs.len());
    Ok(0)
}

fn gradcheck(seed: u64, inject_fault: bool) -> Result<u8> {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for layers in [1, 2] {
        let (params, batch) = grad_check_fixture(layers, seed);
        let report = if inject_fault {
            grad_check_with(&params, &batch, &cfg, seed, |g| {
                g.tensors_mut()[0].1.iter_mut().for_each(|v| *v *= 1.5);
            })
        } else {
            grad_check(&params, &batch, &cfg, seed)
        }
        .map_err(|e| anyhow!(e))?;
        println!("{layers} layer(s): max relative error {:.3e}", report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }
    let ok = worst < GRAD_CHECK_TOLERANCE;
    println!(
        "gradient check {}: max relative error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:.0e})",
        if ok { "passed" } else { "FAILED" }
    );
    if !ok {
        return Ok(EXIT_FAILURE);
    }
    Ok(0)
}

//! Command-line entry points: `gen-data`, `train`, `synth` and `eval`.
//!
//! Every command reads one JSON run config (the toy preset when `--config`
//! is omitted), honours `--seed`, and writes only below `--out`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{generate_corpus, load_manifest, read_mel, write_mel, Corpus, LatentSignatures, Split, SIGNATURES_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_recombination_report, diffusion_oracle_report, disentanglement_report, project_2d, write_json,
    write_projection_csv, DiffusionOracleReport, DisentanglementReport, ProjectedPoint, RecombinationReport,
};
use crate::op_edm::{write_embeddings, EmbeddingRecord};
use crate::training::{load_checkpoint, model_config_mismatch, save_checkpoint, synthesize, Dataset, Trainer};

#[derive(Debug, Parser)]
#[command(name = "emodiff", version, about = "Emotion-transfer diffusion acoustic model on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: mels, manifest and latent signatures.
    GenData(GenDataArgs),
    /// Train all modules jointly; writes metrics and checkpoints.
    Train(TrainArgs),
    /// Synthesize a mel from token ids, a speaker id and a reference mel.
    Synth(SynthArgs),
    /// Embed held-out references and write probe, projection and oracle reports.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; the toy preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the command's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus manifest written by gen-data.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Overrides the number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint instead of fresh parameters.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated token ids.
    #[arg(long)]
    pub tokens: String,
    #[arg(long)]
    pub speaker: usize,
    /// DMEL file whose emotion is transferred.
    #[arg(long = "ref-mel")]
    pub ref_mel: PathBuf,
    /// Reverse-time steps; the config value when omitted.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest; its test split is evaluated.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Reverse-time steps for the recombination syntheses.
    #[arg(long)]
    pub steps: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::toy()),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    started_unix: u64,
    finished_unix: u64,
    version: &'a str,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Timestamps live only here so every other output is reproducible.
fn write_run_metadata(out: &Path, command: &str, started: u64) -> Result<()> {
    write_json(
        &out.join("run_meta.json"),
        &RunMetadata {
            command,
            started_unix: started,
            finished_unix: now(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let started = now();
    let (name, out) = match &cli.command {
        Command::GenData(a) => ("gen-data", a.common.out.clone()),
        Command::Train(a) => ("train", a.common.out.clone()),
        Command::Synth(a) => ("synth", a.common.out.clone()),
        Command::Eval(a) => ("eval", a.common.out.clone()),
    };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Synth(a) => cmd_synth(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
    }
    write_run_metadata(&out, name, started)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.corpus.seed = seed;
    }
    create_out(&args.common.out)?;
    let (corpus, _) = generate_corpus(&cfg.corpus, &args.common.out)?;
    cfg.save(&args.common.out.join("config.json"))?;
    eprintln!("wrote {} utterances to {}", corpus.utterances.len(), args.common.out.display());
    Ok(())
}

/// Fails when the corpus does not fit the configured model widths.
fn check_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    for u in &corpus.utterances {
        if let Some(&tok) = u.tokens.iter().find(|&&t| t as usize >= m.vocab_size) {
            return Err(Error::UnknownToken { id: tok, vocab: m.vocab_size });
        }
        if u.speaker_id >= m.n_speakers {
            return Err(Error::UnknownSpeaker { id: u.speaker_id, count: m.n_speakers });
        }
        if u.emotion_id >= m.n_emotions {
            return Err(Error::LabelOutOfRange { label: u.emotion_id, count: m.n_emotions });
        }
    }
    if let Some(u) = corpus.utterances.first() {
        let (_, bands) = crate::corpus::read_mel_shape(&corpus.mel_path(u))?;
        if bands != m.n_bands {
            return Err(Error::Shape(format!(
                "corpus mels have {bands} bands but the config expects {}",
                m.n_bands
            )));
        }
    }
    Ok(())
}

fn loaded_trainer(checkpoint: &Path, cfg_path: Option<&Path>) -> Result<Trainer> {
    let trainer = load_checkpoint(checkpoint)?;
    if let Some(p) = cfg_path {
        let cfg = RunConfig::load(p)?;
        if let Some(diff) = model_config_mismatch(&trainer.model.config, &cfg) {
            return Err(Error::Config(format!("checkpoint and config disagree on {diff}")));
        }
    }
    Ok(trainer)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = &args.common.out;
    let mut trainer = match &args.resume {
        Some(ckpt) => loaded_trainer(ckpt, args.common.config.as_deref())?,
        None => {
            let mut cfg = load_config(args.common.config.as_deref())?;
            if let Some(seed) = args.common.seed {
                cfg.train.seed = seed;
            }
            Trainer::new(&cfg)?
        }
    };
    let corpus = load_manifest(&args.corpus)?;
    check_corpus(&corpus, trainer.config())?;
    let data = Dataset::load(&corpus, Split::Train)?;
    create_out(out)?;
    trainer.config().save(&out.join("config.json"))?;

    let total = args.steps.unwrap_or(trainer.config().train.steps);
    let remaining = total.saturating_sub(trainer.step);
    let every = trainer.config().train.checkpoint_every.max(1);
    let metrics_path = out.join("metrics.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    trainer.train(&data, remaining, |t, m| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        if t.step % every == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save_checkpoint(t, &out.join(format!("checkpoint_{:06}.safetensors", t.step)))?;
            eprintln!("step {} total {:.4} diff {:.4}", t.step, m.total, m.diff);
        }
        Ok(())
    })?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_checkpoint(&trainer, &out.join("checkpoint.safetensors"))
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    let tokens = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| Error::Invalid(format!("bad token id {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() {
        return Err(Error::Invalid("no tokens given".into()));
    }
    Ok(tokens)
}

#[derive(Serialize)]
struct SynthSummary {
    tokens: Vec<u32>,
    speaker: usize,
    durations: Vec<u32>,
    frames: usize,
    steps: usize,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let trainer = loaded_trainer(&args.checkpoint, args.common.config.as_deref())?;
    let model = &trainer.model;
    let tokens = parse_tokens(&args.tokens)?;
    let vocab = model.config.model.vocab_size;
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::UnknownToken { id: t, vocab });
    }
    let reference = read_mel(&args.ref_mel)?;
    if reference.bands() != model.config.model.n_bands {
        return Err(Error::Shape(format!(
            "reference mel has {} bands but the checkpoint expects {}",
            reference.bands(),
            model.config.model.n_bands
        )));
    }
    let steps = args.steps.unwrap_or(model.config.schedule.inference_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed.unwrap_or(model.config.eval.synth_seed));
    let synth = synthesize(model, &tokens, args.speaker, &reference, steps, model.config.schedule.temperature, &mut rng)?;
    create_out(&args.common.out)?;
    write_mel(&synth.mel, &args.common.out.join("synth.dmel"))?;
    write_json(
        &args.common.out.join("synth.json"),
        &SynthSummary {
            tokens,
            speaker: args.speaker,
            durations: synth.durations,
            frames: synth.mel.frames(),
            steps,
        },
    )
}

#[derive(Serialize)]
struct EvalReport {
    step: u64,
    disentanglement: DisentanglementReport,
    recombination: Option<RecombinationReport>,
    diffusion_oracle: DiffusionOracleReport,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let trainer = loaded_trainer(&args.checkpoint, args.common.config.as_deref())?;
    let model = &trainer.model;
    let cfg = &model.config;
    let corpus = load_manifest(&args.corpus)?;
    check_corpus(&corpus, cfg)?;
    let test = Dataset::load(&corpus, Split::Test)?;
    let split_seed = args.common.seed.unwrap_or(cfg.eval.split_seed);
    let out = &args.common.out;
    create_out(out)?;

    let mels: Vec<_> = test.mels.iter().collect();
    let embeddings = model.embed_all(&mels)?;
    let records: Vec<EmbeddingRecord> = test
        .utterances
        .iter()
        .zip(&embeddings)
        .map(|(u, e)| EmbeddingRecord {
            utterance_id: u.id.clone(),
            speaker_id: u.speaker_id,
            emotion_id: u.emotion_id,
            embedding: e.clone(),
        })
        .collect();
    write_embeddings(&out.join("embeddings.jsonl"), &records)?;
    let coords = project_2d(&embeddings)?;
    let points: Vec<ProjectedPoint> = records
        .iter()
        .zip(coords)
        .map(|(r, [x, y])| ProjectedPoint {
            id: r.utterance_id.clone(),
            x,
            y,
            speaker_id: r.speaker_id,
            emotion_id: r.emotion_id,
        })
        .collect();
    write_projection_csv(&out.join("projection.csv"), &points)?;

    let signatures_path = corpus.root.join(SIGNATURES_FILE);
    let recombination = if signatures_path.exists() {
        let sig = LatentSignatures::load(&signatures_path)?;
        let steps = args.steps.unwrap_or(cfg.schedule.inference_steps);
        Some(cross_recombination_report(model, &test, &sig, cfg.eval.synth_trials, steps, cfg.eval.synth_seed)?)
    } else {
        None
    };
    let report = EvalReport {
        step: trainer.step,
        disentanglement: disentanglement_report(model, &test, split_seed)?,
        recombination,
        diffusion_oracle: diffusion_oracle_report(&model.schedule, cfg.eval.oracle_paths, split_seed)?,
    };
    write_json(&out.join("report.json"), &report)
}

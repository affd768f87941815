//! `chirpbed` command-line interface.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::TaskType;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::container::EmbeddingsFile;
use crate::harness::pipeline::{self, SourcedRecord, TaskManifests};
use crate::ingest::{load_taxonomy, Split, Taxon, TaxonLevel};
use crate::synth::{generate_corpus, nested_taxonomy, write_corpus, write_taxonomy, CorpusConfig};
use crate::train::{Phase, PhaseConfig};
use crate::windowing::WindowStrategy;

#[derive(Debug, Parser)]
#[command(name = "chirpbed", version, about = "Bioacoustic embedding pipeline")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every recording of a manifest into a BEK1 file.
    Embed(EmbedArgs),
    /// Train one phase and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate frozen embeddings and write a quality report.
    Eval(EvalArgs),
    /// List energy-peak candidates per recording as JSON lines.
    Peaks(PeaksArgs),
    /// Write a synthetic corpus (WAV files, manifests and taxonomy).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub stride: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file of PhaseConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub phase: Option<String>,
    /// Checkpoint to start from (required for phase two).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines log path (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub label_level: Option<TaxonLevel>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub window_strategy: Option<WindowStrategy>,
    /// Held-out manifest for periodic top-1 checks (`validate_every` > 0).
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Train on every record instead of the `train` split only.
    #[arg(long)]
    pub all_splits: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub classify: Vec<PathBuf>,
    #[arg(long)]
    pub retrieval: Vec<PathBuf>,
    #[arg(long)]
    pub transfer: Vec<PathBuf>,
    /// Comma-separated task types (default: every task with a manifest).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<TaskType>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Window stride when embedding from a checkpoint.
    #[arg(long, default_value_t = 2.5)]
    pub stride: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV path (default: `<out>` with a `.csv` extension).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PeaksArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "synth")]
    pub dataset: String,
    #[arg(long, default_value_t = 50)]
    pub per_species: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_per_species: usize,
    #[arg(long, default_value_t = 3.0)]
    pub min_s: f64,
    #[arg(long, default_value_t = 30.0)]
    pub max_s: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.10)]
    pub genus_step: f64,
    #[arg(long, default_value_t = 0.025)]
    pub species_step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<EmbeddingsFile> {
    let (ckpt, checksum) = Checkpoint::read(&args.checkpoint)?;
    let records = SourcedRecord::load_manifest(&args.manifest)?;
    let outcome = pipeline::embed_records(&ckpt.params, checksum, &records, args.stride)?;
    outcome.file.write(&args.out)?;
    if !outcome.failures.is_empty() {
        let mut msg = format!("{} of {} records failed:", outcome.failures.len(), records.len());
        for (id, e) in &outcome.failures {
            let _ = write!(msg, "\n  {id}: {e}");
        }
        return Err(Error::Validation(msg));
    }
    Ok(outcome.file)
}

/// Config file (if any) over phase defaults, then flags over both.
pub fn resolve_config(args: &TrainArgs) -> Result<PhaseConfig> {
    let phase = args.phase.as_deref().map(parse_phase).transpose()?;
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(p) = phase {
        let name = if p == Phase::One { "one" } else { "two" };
        table.insert("phase".into(), toml::Value::String(name.into()));
    }
    let mut cfg = PhaseConfig::from_toml_str(&table.to_string())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.label_level {
        cfg.label_level = v;
    }
    if let Some(v) = args.window_strategy {
        cfg.window_strategy = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "one" | "1" => Ok(Phase::One),
        "two" | "2" => Ok(Phase::Two),
        other => Err(Error::Usage(format!("unknown phase {other:?} (one|two)"))),
    }
}

fn read_taxonomy(path: Option<&Path>) -> Result<Option<HashMap<String, Taxon>>> {
    path.map(load_taxonomy).transpose()
}

pub fn cmd_train(args: &TrainArgs) -> Result<Checkpoint> {
    let cfg = resolve_config(args)?;
    let mut records = SourcedRecord::load_manifest(&args.manifest)?;
    if !args.all_splits {
        records.retain(|r| r.meta.split == Split::Train);
    }
    let init = args.init_from.as_ref().map(|p| Checkpoint::read(p).map(|(c, _)| c)).transpose()?;
    let validation = args.validation.as_deref().map(SourcedRecord::load_manifest).transpose()?;
    let taxonomy = read_taxonomy(args.taxonomy.as_deref())?;
    let outcome = pipeline::train(&cfg, &records, taxonomy, init, validation.as_deref())?;
    outcome.checkpoint.write(&args.out)?;
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?);
        log.push('\n');
    }
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    write_file(&log_path, log.as_bytes())?;
    Ok(outcome.checkpoint)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<crate::eval::QualityReport> {
    let load = |paths: &[PathBuf]| -> Result<Vec<SourcedRecord>> {
        let mut out = Vec::new();
        for p in paths {
            out.extend(SourcedRecord::load_manifest(p)?);
        }
        Ok(out)
    };
    let manifests = TaskManifests {
        classify: load(&args.classify)?,
        retrieval: load(&args.retrieval)?,
        transfer: load(&args.transfer)?,
    };
    let tasks: Vec<TaskType> = if args.tasks.is_empty() {
        TaskType::ALL.into_iter().filter(|&t| !manifests.get(t).is_empty()).collect()
    } else {
        let mut t = args.tasks.clone();
        t.sort();
        t.dedup();
        t
    };
    if tasks.is_empty() {
        return Err(Error::Usage("no tasks: pass --classify, --retrieval or --transfer manifests".into()));
    }
    manifests.check(&tasks)?;
    let checkpoint = args.checkpoint.as_ref().map(Checkpoint::read).transpose()?;
    let file = match (&args.embeddings, &checkpoint) {
        (Some(path), _) => {
            let file = EmbeddingsFile::read(path)?;
            if let Some((_, sum)) = &checkpoint {
                if *sum != file.checksum {
                    return Err(Error::Validation(format!(
                        "{} was not produced by {}",
                        path.display(),
                        args.checkpoint.as_ref().unwrap().display()
                    )));
                }
            }
            file
        }
        (None, Some((ckpt, sum))) => {
            let outcome = pipeline::embed_records(&ckpt.params, *sum, &manifests.union(&tasks), args.stride)?;
            if let Some((id, e)) = outcome.failures.into_iter().next() {
                return Err(Error::Validation(format!("recording {id}: {e}")));
            }
            outcome.file
        }
        (None, None) => return Err(Error::Usage("pass --checkpoint or --embeddings".into())),
    };
    let report = pipeline::evaluate(&file, checkpoint.as_ref().map(|(c, _)| c), &manifests, &tasks, args.seed)?;
    write_file(&args.out, report.to_json().as_bytes())?;
    let csv = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_file(&csv, report.to_csv().as_bytes())?;
    if !report.missing_task_types.is_empty() {
        let names: Vec<&str> = report.missing_task_types.iter().map(|t| t.name()).collect();
        log::warn!("no overall score: missing task types {}", names.join(", "));
    }
    Ok(report)
}

pub fn cmd_peaks(args: &PeaksArgs) -> Result<()> {
    let records = SourcedRecord::load_manifest(&args.manifest)?;
    let mut out = String::new();
    let mut failures = Vec::new();
    for (id, res) in pipeline::record_peaks(&records) {
        match res {
            Ok(peaks) => {
                let rec = pipeline::PeakRecord { id, peaks };
                out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
                out.push('\n');
            }
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    write_file(&args.out, out.as_bytes())?;
    if !failures.is_empty() {
        return Err(Error::Validation(format!("{} records failed:\n  {}", failures.len(), failures.join("\n  "))));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let species = nested_taxonomy(args.genus_step, args.species_step);
    let cfg = CorpusConfig {
        dataset: args.dataset.clone(),
        per_species: args.per_species,
        eval_per_species: args.eval_per_species,
        min_s: args.min_s,
        max_s: args.max_s,
        noise_rms: args.noise,
        seed: args.seed,
    };
    let items = generate_corpus(&species, &cfg)?;
    write_corpus(&args.out_dir, &items)?;
    write_taxonomy(&args.out_dir.join("taxonomy.jsonl"), &species)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Embed(a) => cmd_embed(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(a)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Peaks(a) => cmd_peaks(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

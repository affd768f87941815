//! Library-level drivers behind the CLI subcommands.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    eval_linear_probe, eval_pretrained, eval_retrieval, ClassifyConfig, LabeledEmbedding, ProbeConfig, QualityReport,
    TaskScore, TaskType,
};
use crate::frontend::{Frontend, FrontendConfig};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::container::{EmbeddingRecord, EmbeddingsFile, WindowEmbedding};
use crate::ingest::{
    coarsen_labels, decode_and_resample, relabel_records, AudioBuffer, LabelVocabulary, RecordingMeta, Taxon,
    TaxonLevel, TARGET_SAMPLE_RATE,
};
use crate::model::{embed, init_params, prototype_logits, ModelDims, ModelParams};
use crate::train::{run_phase, LogEntry, Phase, PhaseConfig, TrainingSet, ValidationSet};
use crate::windowing::{enumerate_window_specs, enumerate_windows, find_energy_peaks, PeakCandidate, TRAIN_WINDOW_S};

/// A manifest entry together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct SourcedRecord {
    pub meta: RecordingMeta,
    pub base_dir: PathBuf,
}

impl SourcedRecord {
    pub fn load_manifest(path: &Path) -> Result<Vec<SourcedRecord>> {
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(crate::ingest::load_manifest(path)?
            .into_iter()
            .map(|meta| SourcedRecord {
                meta,
                base_dir: base_dir.clone(),
            })
            .collect())
    }

    pub fn decode(&self) -> Result<AudioBuffer> {
        decode_and_resample(self.meta.resolved_path(&self.base_dir), TARGET_SAMPLE_RATE)
    }
}

/// Embeddings of every window of one recording.
pub fn embed_audio(
    frontend: &Frontend,
    params: &ModelParams,
    id: &str,
    audio: &AudioBuffer,
    stride_s: f64,
) -> Result<Vec<WindowEmbedding>> {
    enumerate_window_specs(id, audio.duration_s(), TRAIN_WINDOW_S, stride_s)
        .iter()
        .map(|w| {
            let spec = frontend.compute(&AudioBuffer::new(w.extract(audio), audio.sample_rate))?;
            let (pair, _) = embed(&spec, params, 0.0, None)?;
            Ok(WindowEmbedding::from_pair(&pair))
        })
        .collect()
}

#[derive(Debug)]
pub struct EmbedOutcome {
    pub file: EmbeddingsFile,
    pub failures: Vec<(String, Error)>,
}

/// Embed each record at `stride_s`. Records that fail are reported and skipped;
/// output order follows the input.
pub fn embed_records(
    params: &ModelParams,
    checksum: [u8; 32],
    records: &[SourcedRecord],
    stride_s: f64,
) -> Result<EmbedOutcome> {
    if !(stride_s.is_finite() && stride_s > 0.0) {
        return Err(Error::Usage(format!("stride must be > 0, got {stride_s}")));
    }
    let frontend = Frontend::new(FrontendConfig::default())?;
    let results: Vec<Result<EmbeddingRecord>> = records
        .par_iter()
        .map(|r| {
            let audio = r.decode()?;
            r.meta.validate_duration(audio.duration_s())?;
            Ok(EmbeddingRecord {
                recording_id: r.meta.recording_id.clone(),
                duration_s: audio.duration_s(),
                windows: embed_audio(&frontend, params, &r.meta.recording_id, &audio, stride_s)?,
            })
        })
        .collect();
    let dims = &params.dims;
    let mut file = EmbeddingsFile::new(dims.d, dims.grid_t, dims.grid_f, stride_s, checksum);
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(rec) => file.records.push(rec),
            Err(e) => failures.push((r.meta.recording_id.clone(), e)),
        }
    }
    Ok(EmbedOutcome { file, failures })
}

/// Manifests per task type.
#[derive(Debug, Clone, Default)]
pub struct TaskManifests {
    pub classify: Vec<SourcedRecord>,
    pub retrieval: Vec<SourcedRecord>,
    pub transfer: Vec<SourcedRecord>,
}

impl TaskManifests {
    pub fn get(&self, t: TaskType) -> &[SourcedRecord] {
        match t {
            TaskType::Classify => &self.classify,
            TaskType::Retrieval => &self.retrieval,
            TaskType::Transfer => &self.transfer,
        }
    }

    /// Every distinct record across the requested tasks, first occurrence kept.
    pub fn union(&self, tasks: &[TaskType]) -> Vec<SourcedRecord> {
        let mut seen = std::collections::HashSet::new();
        tasks
            .iter()
            .flat_map(|&t| self.get(t))
            .filter(|r| seen.insert(r.meta.recording_id.clone()))
            .cloned()
            .collect()
    }

    /// Requested tasks must have records carrying the fields they need.
    pub fn check(&self, tasks: &[TaskType]) -> Result<()> {
        for &t in tasks {
            let records = self.get(t);
            if records.is_empty() {
                return Err(Error::Usage(format!("task {} requested but no --{} manifest given", t.name(), t.name())));
            }
            for r in records {
                let ok = match t {
                    TaskType::Classify => r.meta.annotations.is_some(),
                    _ => !r.meta.labels.is_empty(),
                };
                if !ok {
                    let field = if t == TaskType::Classify { "annotations" } else { "labels" };
                    return Err(Error::Validation(format!(
                        "task {}: record {} has no `{field}` field",
                        t.name(),
                        r.meta.recording_id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn stream_id(task: TaskType, dataset: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task.name().bytes().chain([b'/']).chain(dataset.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn task_rng(seed: u64, task: TaskType, dataset: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(task, dataset));
    rng
}

fn by_dataset(records: &[SourcedRecord]) -> BTreeMap<&str, Vec<&RecordingMeta>> {
    let mut out: BTreeMap<&str, Vec<&RecordingMeta>> = BTreeMap::new();
    for r in records {
        out.entry(r.meta.dataset.as_str()).or_default().push(&r.meta);
    }
    out
}

/// Run the requested protocols over an embeddings file. Classification also
/// needs the checkpoint (prototype head) that produced the file.
pub fn evaluate(
    file: &EmbeddingsFile,
    checkpoint: Option<&Checkpoint>,
    manifests: &TaskManifests,
    tasks: &[TaskType],
    seed: u64,
) -> Result<QualityReport> {
    manifests.check(tasks)?;
    let index: HashMap<&str, &EmbeddingRecord> = file.records.iter().map(|r| (r.recording_id.as_str(), r)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("recording {id} missing from embeddings file")))
    };
    let mut scores: Vec<TaskScore> = Vec::new();
    for &task in tasks {
        for (dataset, metas) in by_dataset(manifests.get(task)) {
            let mut rng = task_rng(seed, task, dataset);
            let score = match task {
                TaskType::Classify => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        Error::Usage("classify needs --checkpoint for the prototype head".into())
                    })?;
                    let cfg = ClassifyConfig::default();
                    if (file.stride_s as f64 - cfg.stride_s).abs() > 1e-6 {
                        return Err(Error::Validation(format!(
                            "classify needs windows at stride {} s, embeddings file has {} s",
                            cfg.stride_s, file.stride_s
                        )));
                    }
                    let vocab = LabelVocabulary::new(ckpt.header.classes.clone())?;
                    let recs = metas
                        .iter()
                        .map(|m| Ok(((*m).clone(), lookup(&m.recording_id)?.duration_s)))
                        .collect::<Result<Vec<_>>>()?;
                    eval_pretrained(dataset, &recs, &vocab, &cfg, |meta, w| {
                        let rec = lookup(&meta.recording_id)?;
                        let starts = enumerate_windows(rec.duration_s, cfg.window_s, file.stride_s as f64);
                        let i = starts
                            .iter()
                            .position(|&s| (s - w.start_s).abs() < 1e-9)
                            .unwrap_or(usize::MAX);
                        let w = rec.windows.get(i).ok_or_else(|| {
                            Error::Validation(format!("recording {}: window {i} missing", meta.recording_id))
                        })?;
                        Ok(prototype_logits(&w.spatial_f64(), &ckpt.params))
                    })?
                }
                TaskType::Retrieval | TaskType::Transfer => {
                    let items = metas
                        .iter()
                        .map(|m| {
                            Ok(LabeledEmbedding {
                                id: m.recording_id.clone(),
                                labels: m.labels.clone(),
                                embedding: lookup(&m.recording_id)?.recording_mean(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if task == TaskType::Retrieval {
                        eval_retrieval(dataset, &items, &mut rng)?
                    } else {
                        eval_linear_probe(dataset, &items, &ProbeConfig::default(), &mut rng)?
                    }
                }
            };
            scores.push(score);
        }
    }
    Ok(QualityReport::summarize(&scores))
}

/// Training driver output.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Stream reserved for parameter initialization; example streams count up from 0.
const INIT_STREAM: u64 = u64::MAX;

pub fn init_for(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    init_params(dims, &mut rng)
}

fn training_vocab(
    records: &[RecordingMeta],
    taxonomy: Option<HashMap<String, Taxon>>,
    level: TaxonLevel,
) -> Result<(LabelVocabulary, Vec<RecordingMeta>)> {
    let mut vocab = LabelVocabulary::from_records(records);
    if let Some(t) = taxonomy {
        vocab = vocab.with_taxonomy(t);
    }
    if level == TaxonLevel::Species {
        return Ok((vocab, records.to_vec()));
    }
    let relabelled = relabel_records(records, &vocab, level)?;
    let (coarse, _) = coarsen_labels(&vocab, level)?;
    Ok((coarse, relabelled))
}

/// Train one phase on the given records. Phase two requires an initial
/// checkpoint that has completed phase one.
pub fn train(
    cfg: &PhaseConfig,
    records: &[SourcedRecord],
    taxonomy: Option<HashMap<String, Taxon>>,
    init: Option<Checkpoint>,
    validation: Option<&[SourcedRecord]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    if cfg.phase == Phase::Two && !init.as_ref().is_some_and(|c| c.header.phases.contains(&Phase::One)) {
        return Err(Error::Usage("phase two needs --init-from a phase-one checkpoint".into()));
    }
    let metas: Vec<RecordingMeta> = records.iter().map(|r| r.meta.clone()).collect();
    let (vocab, metas) = training_vocab(&metas, taxonomy, cfg.label_level)?;
    let audio = records.par_iter().map(|r| r.decode()).collect::<Result<Vec<_>>>()?;
    let data = TrainingSet::from_audio(&metas, audio, vocab.clone(), cfg.window_strategy)?;

    let (params, mut phases, prior_steps) = match init {
        Some(c) => {
            if c.header.classes != vocab.classes() || c.header.label_level != cfg.label_level {
                return Err(Error::Validation(
                    "initial checkpoint was trained on a different label vocabulary".into(),
                ));
            }
            let d = &c.params.dims;
            if (d.hidden, d.d, d.source_rank, d.similarity) != (cfg.hidden, cfg.d, cfg.source_rank, cfg.similarity) {
                return Err(Error::Config("config model dims differ from the initial checkpoint".into()));
            }
            (c.params, c.header.phases, c.header.steps)
        }
        None => {
            let mut dims = ModelDims::new(vocab.len(), data.num_sources());
            dims.hidden = cfg.hidden;
            dims.d = cfg.d;
            dims.source_rank = cfg.source_rank;
            dims.similarity = cfg.similarity;
            (init_for(dims, cfg.seed)?, Vec::new(), 0)
        }
    };

    let validation = match validation {
        Some(v) if cfg.validate_every > 0 => Some(validation_set(v, &vocab, cfg.label_level)?),
        _ => None,
    };
    let (params, log) = run_phase(cfg, &data, params, validation.as_ref())?;
    phases.push(cfg.phase);
    let checkpoint = Checkpoint::new(
        params,
        vocab.classes().to_vec(),
        cfg.label_level,
        phases,
        cfg.seed,
        prior_steps + cfg.max_steps,
        Some(cfg.clone()),
    )
    .quantized();
    Ok(TrainOutcome { checkpoint, log })
}

/// Non-overlapping 5 s windows of held-out records, labelled at the training level.
fn validation_set(records: &[SourcedRecord], vocab: &LabelVocabulary, level: TaxonLevel) -> Result<ValidationSet> {
    let frontend = Frontend::new(FrontendConfig::default())?;
    let metas: Vec<RecordingMeta> = records.iter().map(|r| r.meta.clone()).collect();
    let metas = if level == TaxonLevel::Species {
        metas
    } else {
        relabel_records(&metas, vocab, level)?
    };
    let parts = records
        .par_iter()
        .zip(&metas)
        .map(|(r, m)| {
            let audio = r.decode()?;
            let labels = m.labels.iter().map(|l| vocab.require_id(l)).collect::<Result<Vec<_>>>()?;
            enumerate_window_specs(&m.recording_id, audio.duration_s(), TRAIN_WINDOW_S, TRAIN_WINDOW_S)
                .iter()
                .map(|w| Ok((frontend.compute(&AudioBuffer::new(w.extract(&audio), audio.sample_rate))?, labels.clone())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = ValidationSet::default();
    for (spec, labels) in parts.into_iter().flatten() {
        set.spectrograms.push(spec);
        set.labels.push(labels);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakRecord {
    pub id: String,
    pub peaks: Vec<PeakCandidate>,
}

/// Energy peaks per record, in input order.
pub fn record_peaks(records: &[SourcedRecord]) -> Vec<(String, Result<Vec<PeakCandidate>>)> {
    records
        .par_iter()
        .map(|r| (r.meta.recording_id.clone(), r.decode().and_then(|a| find_energy_peaks(&a))))
        .collect()
}

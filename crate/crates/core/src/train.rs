//! Losses, Adam and the two-phase training loop.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_signals, sample_components, sample_mixture_spec, MixupConfig};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig, LogMelSpectrogram};
use crate::ingest::{decode_and_resample, AudioBuffer, LabelVocabulary, RecordingMeta, TaxonLevel, TARGET_SAMPLE_RATE};
use crate::model::{backward, forward, linear_logits, embed, ModelParams, ParamBlocks, Similarity, Upstream};
use crate::windowing::{find_energy_peaks, select_window_from_peaks, PeakCandidate, WindowStrategy};

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Softmax cross-entropy against a target with mass `1/k` on each of the `k`
/// distinct target classes. Returns the loss and its gradient w.r.t. `logits`.
pub fn species_ce(logits: &[f64], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut t = targets.to_vec();
    t.sort_unstable();
    t.dedup();
    if t.is_empty() {
        return Err(Error::Validation("empty target set".into()));
    }
    if let Some(&bad) = t.iter().find(|&&c| c >= logits.len()) {
        return Err(Error::Validation(format!("target class {bad} out of range {}", logits.len())));
    }
    let w = 1.0 / t.len() as f64;
    let lsm = log_softmax(logits);
    let loss = -t.iter().map(|&c| w * lsm[c]).sum::<f64>();
    let mut grad: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
    for &c in &t {
        grad[c] -= w;
    }
    Ok((loss.max(0.0), grad))
}

/// Softmax cross-entropy against one source id.
pub fn source_ce(logits: &[f64], source: usize) -> Result<(f64, Vec<f64>)> {
    if source >= logits.len() {
        return Err(Error::Validation(format!("source id {source} out of range {}", logits.len())));
    }
    species_ce(logits, &[source])
}

/// `−Σ softmax(teacher)ᵢ · ln softmax(student)ᵢ`; gradient is w.r.t. the student only.
pub fn distillation_loss(teacher: &[f64], student: &[f64]) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::Shape("teacher and student lengths differ".into()));
    }
    let p = softmax(teacher);
    let lsm = log_softmax(student);
    let loss = -p.iter().zip(&lsm).map(|(pi, li)| pi * li).sum::<f64>();
    let grad = lsm.iter().zip(&p).map(|(l, pi)| l.exp() - pi).collect();
    Ok((loss, grad))
}

/// `Σ_c ‖P̂_c P̂_cᵀ − I‖²_F / C` over L2-normalized prototype rows, with its
/// gradient w.r.t. the raw prototypes.
pub fn orthogonality_loss(protos: &[f64], classes: usize, per_class: usize, d: usize) -> Result<(f64, Vec<f64>)> {
    if protos.len() != classes * per_class * d {
        return Err(Error::Shape("prototype tensor size".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; protos.len()];
    let mut unit = vec![0.0; per_class * d];
    let mut norms = vec![0.0; per_class];
    for c in 0..classes {
        let block = &protos[c * per_class * d..(c + 1) * per_class * d];
        for j in 0..per_class {
            let row = &block[j * d..(j + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Numeric(format!("prototype {j} of class {c} has zero norm")));
            }
            norms[j] = n;
            for k in 0..d {
                unit[j * d + k] = row[k] / n;
            }
        }
        // residual R = G − I
        let mut resid = vec![0.0; per_class * per_class];
        for i in 0..per_class {
            for j in 0..per_class {
                let g: f64 = (0..d).map(|k| unit[i * d + k] * unit[j * d + k]).sum();
                let r = g - if i == j { 1.0 } else { 0.0 };
                resid[i * per_class + j] = r;
                loss += r * r;
            }
        }
        // dL/dû_i = 4 Σ_j R_ij û_j, then project through the normalization
        for i in 0..per_class {
            let mut du = vec![0.0; d];
            for j in 0..per_class {
                let r = resid[i * per_class + j];
                for k in 0..d {
                    du[k] += 4.0 * r * unit[j * d + k];
                }
            }
            let radial: f64 = (0..d).map(|k| du[k] * unit[i * d + k]).sum();
            let off = (c * per_class + i) * d;
            for k in 0..d {
                grad[off + k] = (du[k] - radial * unit[i * d + k]) / norms[i];
            }
        }
    }
    let scale = 1.0 / classes as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Bias-corrected Adam over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_lens: &[usize]) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let lens: Vec<usize> = params.blocks.as_slices().iter().map(|b| b.len()).collect();
        Self::new(&lens)
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("adam block count".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("adam block {i} length")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in block {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &ParamBlocks, lr: f64) -> Result<()> {
    state.step(&mut params.blocks.as_mut_slices(), &grads.as_slices(), lr)?;
    params.touch();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    One,
    Two,
}

/// Every training knob. Serialized flat so it doubles as the config-file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub source_loss_weight: f64,
    pub distill_loss_weight: f64,
    pub orthogonality_weight: f64,
    /// Train the prototype head (species CE + orthogonality).
    pub prototype_loss: bool,
    pub mixup_n: u32,
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    pub mixup_omega: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub window_strategy: WindowStrategy,
    pub seed: u64,
    pub validate_every: u64,
    pub label_level: TaxonLevel,
    pub hidden: usize,
    pub d: usize,
    pub source_rank: usize,
    pub similarity: Similarity,
}

pub const PHASE_ONE_MAX_STEPS: u64 = 300_000;
pub const PHASE_TWO_MAX_STEPS: u64 = 400_000;

impl PhaseConfig {
    pub fn phase_one() -> Self {
        Self {
            phase: Phase::One,
            learning_rate: 6.41e-4,
            dropout_rate: 0.49,
            source_loss_weight: 0.11,
            distill_loss_weight: 0.0,
            orthogonality_weight: 1.0,
            prototype_loss: true,
            mixup_n: 2,
            mixup_alpha: 91.3,
            mixup_beta: 100.0,
            mixup_omega: 1.0,
            max_steps: 3000,
            batch_size: 64,
            window_strategy: WindowStrategy::Random,
            seed: 0,
            validate_every: 0,
            label_level: TaxonLevel::Species,
            hidden: 64,
            d: 64,
            source_rank: 16,
            similarity: Similarity::Dot,
        }
    }

    pub fn phase_two() -> Self {
        Self {
            phase: Phase::Two,
            learning_rate: 3.20e-6,
            dropout_rate: 0.0,
            source_loss_weight: 0.0,
            distill_loss_weight: 4.22,
            mixup_n: 0,
            ..Self::phase_one()
        }
    }

    pub fn defaults_for(phase: Phase) -> Self {
        match phase {
            Phase::One => Self::phase_one(),
            Phase::Two => Self::phase_two(),
        }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            n: self.mixup_n,
            alpha: self.mixup_alpha,
            beta: self.mixup_beta,
            omega: self.mixup_omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase == Phase::One && self.distill_loss_weight != 0.0 {
            return Err(Error::Config("phase one requires distill_loss_weight = 0".into()));
        }
        let cap = match self.phase {
            Phase::One => PHASE_ONE_MAX_STEPS,
            Phase::Two => PHASE_TWO_MAX_STEPS,
        };
        if self.max_steps > cap {
            return Err(Error::Config(format!("max_steps {} exceeds {cap}", self.max_steps)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("source_loss_weight", self.source_loss_weight),
            ("distill_loss_weight", self.distill_loss_weight),
            ("orthogonality_weight", self.orthogonality_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        self.mixup().validate()
    }

    /// Parse a TOML key/value file. `phase` selects the defaults the other keys override.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let phase = match table.get("phase") {
            Some(v) => v
                .clone()
                .try_into::<Phase>()
                .map_err(|e| Error::Config(format!("phase: {e}")))?,
            None => Phase::One,
        };
        Self::defaults_for(phase).overlay(table)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn valid_keys() -> Vec<String> {
        Self::key_table(&Self::phase_one()).keys().cloned().collect()
    }

    fn key_table(cfg: &Self) -> toml::Table {
        toml::Table::try_from(cfg).expect("config serializes to a table")
    }

    /// Apply `overrides` on top of `self`, rejecting unknown keys.
    pub fn overlay(&self, overrides: toml::Table) -> Result<Self> {
        let mut base = Self::key_table(self);
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!(
                    "unknown config key {k:?}; valid keys: {}",
                    Self::valid_keys().join(", ")
                )));
            }
            base.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub species_linear: f64,
    pub species_prototype: f64,
    pub orthogonality: f64,
    pub source: f64,
    pub distillation: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &PhaseConfig) -> f64 {
        self.species_linear
            + self.species_prototype
            + cfg.orthogonality_weight * self.orthogonality
            + cfg.source_loss_weight * self.source
            + cfg.distill_loss_weight * self.distillation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_top1: Option<f64>,
}

/// A decoded training recording.
#[derive(Debug, Clone)]
pub struct TrainingRecording {
    pub id: String,
    pub labels: Vec<usize>,
    pub source: usize,
    pub audio: AudioBuffer,
    pub peaks: Vec<PeakCandidate>,
}

/// Decoded training split. Source ids are positions in the manifest.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub vocab: LabelVocabulary,
    pub recordings: Vec<TrainingRecording>,
}

impl TrainingSet {
    /// Decode every record; peaks are computed only for the peak strategy.
    pub fn load(
        records: &[RecordingMeta],
        base_dir: &Path,
        vocab: LabelVocabulary,
        strategy: WindowStrategy,
    ) -> Result<Self> {
        let recordings = records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let audio = decode_and_resample(r.resolved_path(base_dir), TARGET_SAMPLE_RATE)?;
                Self::make(r, i, audio, &vocab, strategy)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vocab, recordings })
    }

    /// Build from already-decoded audio (same order as `records`).
    pub fn from_audio(
        records: &[RecordingMeta],
        audio: Vec<AudioBuffer>,
        vocab: LabelVocabulary,
        strategy: WindowStrategy,
    ) -> Result<Self> {
        let recordings = records
            .iter()
            .zip(audio)
            .enumerate()
            .map(|(i, (r, a))| Self::make(r, i, a, &vocab, strategy))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vocab, recordings })
    }

    fn make(
        r: &RecordingMeta,
        source: usize,
        audio: AudioBuffer,
        vocab: &LabelVocabulary,
        strategy: WindowStrategy,
    ) -> Result<TrainingRecording> {
        let labels = r.labels.iter().map(|l| vocab.require_id(l)).collect::<Result<Vec<_>>>()?;
        if labels.is_empty() {
            return Err(Error::Validation(format!("record {} has no labels", r.recording_id)));
        }
        let peaks = match strategy {
            WindowStrategy::Peak => find_energy_peaks(&audio)?,
            WindowStrategy::Random => Vec::new(),
        };
        Ok(TrainingRecording {
            id: r.recording_id.clone(),
            labels,
            source,
            audio,
            peaks,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.recordings.len()
    }
}

/// Held-out windows for periodic top-1 checks of the linear head.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub spectrograms: Vec<LogMelSpectrogram>,
    pub labels: Vec<Vec<usize>>,
}

impl ValidationSet {
    pub fn top1(&self, params: &ModelParams) -> Result<f64> {
        let rows = self
            .spectrograms
            .par_iter()
            .zip(&self.labels)
            .map(|(spec, labels)| {
                let (pair, _) = embed(spec, params, 0.0, None)?;
                Ok((linear_logits(&pair.mean, params), labels.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::eval::top1(&rows))
    }
}

/// One mixed training example.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub spectrogram: LogMelSpectrogram,
    pub targets: Vec<usize>,
    pub source: usize,
}

/// Build the `index`-th example of `step` from its own generator stream.
pub fn make_example(
    cfg: &PhaseConfig,
    data: &TrainingSet,
    frontend: &Frontend,
    rng: &mut dyn RngCore,
) -> Result<TrainingExample> {
    let mut weights = sample_mixture_spec(&cfg.mixup(), rng)?;
    let comps = sample_components(data.recordings.len(), weights.len(), rng);
    if comps.len() < weights.len() {
        weights.truncate(comps.len());
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
    }
    let mut signals = Vec::with_capacity(comps.len());
    let mut targets = Vec::new();
    for &ci in &comps {
        let rec = &data.recordings[ci];
        let w = select_window_from_peaks(&rec.id, rec.audio.duration_s(), &rec.peaks, cfg.window_strategy, rng);
        signals.push(w.extract(&rec.audio));
        targets.extend_from_slice(&rec.labels);
    }
    targets.sort_unstable();
    targets.dedup();
    let dominant = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
    let refs: Vec<&[f32]> = signals.iter().map(|s| s.as_slice()).collect();
    let mixed = mix_signals(&refs, &weights)?;
    let spectrogram = frontend.compute(&AudioBuffer::new(mixed, frontend.config().sample_rate))?;
    Ok(TrainingExample {
        spectrogram,
        targets,
        source: data.recordings[comps[dominant]].source,
    })
}

/// Per-example losses and accumulated gradients (not yet batch-averaged).
fn example_grads(
    cfg: &PhaseConfig,
    params: &ModelParams,
    ex: &TrainingExample,
    rng: &mut dyn RngCore,
    grads: &mut ParamBlocks,
) -> Result<LossBreakdown> {
    let (_, out, trace) = forward(&ex.spectrogram, params, cfg.dropout_rate, Some(rng))?;
    let (l_lin, mut g_lin) = species_ce(&out.linear, &ex.targets)?;
    let mut losses = LossBreakdown {
        species_linear: l_lin,
        ..Default::default()
    };
    let g_proto = if cfg.prototype_loss {
        let (l, g) = species_ce(&out.prototype, &ex.targets)?;
        losses.species_prototype = l;
        Some(g)
    } else {
        None
    };
    let g_src = if cfg.source_loss_weight > 0.0 {
        let (l, mut g) = source_ce(&out.source, ex.source)?;
        losses.source = l;
        g.iter_mut().for_each(|x| *x *= cfg.source_loss_weight);
        Some(g)
    } else {
        None
    };
    if cfg.distill_loss_weight > 0.0 {
        let (l, g) = distillation_loss(&out.prototype, &out.linear)?;
        losses.distillation = l;
        for (a, b) in g_lin.iter_mut().zip(&g) {
            *a += cfg.distill_loss_weight * b;
        }
    }
    let up = Upstream {
        linear: Some(&g_lin),
        prototype: g_proto.as_deref(),
        source: g_src.as_deref(),
    };
    backward(&trace, params, &up, grads)?;
    Ok(losses)
}

/// Fixed number of reduction chunks so the floating-point summation order
/// does not depend on the thread pool.
const REDUCE_CHUNKS: usize = 8;

fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Batch-mean losses and gradients for one step.
pub fn batch_gradients(
    cfg: &PhaseConfig,
    data: &TrainingSet,
    frontend: &Frontend,
    params: &ModelParams,
    step: u64,
) -> Result<(LossBreakdown, ParamBlocks)> {
    let b = cfg.batch_size;
    let chunk = b.div_ceil(REDUCE_CHUNKS);
    let partials = (0..b)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let mut grads = ParamBlocks::zeros(&params.dims);
            let mut sum = LossBreakdown::default();
            for &i in idx {
                let mut rng = example_rng(cfg.seed, step * b as u64 + i as u64);
                let ex = make_example(cfg, data, frontend, &mut rng)?;
                let l = example_grads(cfg, params, &ex, &mut rng, &mut grads)?;
                sum.species_linear += l.species_linear;
                sum.species_prototype += l.species_prototype;
                sum.source += l.source;
                sum.distillation += l.distillation;
            }
            Ok((sum, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ParamBlocks::zeros(&params.dims);
    let mut losses = LossBreakdown::default();
    for (l, g) in &partials {
        grads.add_assign(g);
        losses.species_linear += l.species_linear;
        losses.species_prototype += l.species_prototype;
        losses.source += l.source;
        losses.distillation += l.distillation;
    }
    let inv = 1.0 / b as f64;
    grads.scale(inv);
    losses.species_linear *= inv;
    losses.species_prototype *= inv;
    losses.source *= inv;
    losses.distillation *= inv;

    if cfg.prototype_loss {
        let dims = &params.dims;
        let (l, g) = orthogonality_loss(&params.blocks.protos, dims.num_classes, dims.prototypes_per_class, dims.d)?;
        losses.orthogonality = l;
        for (a, b) in grads.protos.iter_mut().zip(&g) {
            *a += cfg.orthogonality_weight * b;
        }
    }
    losses.total = losses.weighted_total(cfg);
    Ok((losses, grads))
}

/// Run one training phase from `params`. Adam state starts fresh.
pub fn run_phase(
    cfg: &PhaseConfig,
    data: &TrainingSet,
    mut params: ModelParams,
    validation: Option<&ValidationSet>,
) -> Result<(ModelParams, Vec<LogEntry>)> {
    cfg.validate()?;
    if params.dims.num_classes != data.vocab.len() || params.dims.num_sources != data.num_sources() {
        return Err(Error::Shape(format!(
            "model has {} classes/{} sources, data has {}/{}",
            params.dims.num_classes,
            params.dims.num_sources,
            data.vocab.len(),
            data.num_sources()
        )));
    }
    let frontend = Frontend::new(FrontendConfig::default())?;
    let mut adam = AdamState::for_params(&params);
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    for step in 0..cfg.max_steps {
        let (losses, grads) = batch_gradients(cfg, data, &frontend, &params, step)?;
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        adam_step(&mut adam, &mut params, &grads, cfg.learning_rate)?;
        let validation_top1 = match validation {
            Some(v) if cfg.validate_every > 0 && (step + 1) % cfg.validate_every == 0 => Some(v.top1(&params)?),
            _ => None,
        };
        log::debug!("phase {:?} step {step}: total {:.4}", cfg.phase, losses.total);
        log.push(LogEntry {
            step,
            losses,
            lr: cfg.learning_rate,
            phase: cfg.phase,
            validation_top1,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let (l, _) = species_ce(&[0.3; 7], &[2, 5]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let (l, _) = source_ce(&[0.0; 11], 3).unwrap();
        assert!((l - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_target_gives_zero_loss() {
        let (l, _) = species_ce(&[1000.0, 0.0, 0.0], &[0]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn hand_case_matches_f64_oracle() {
        // targets {0,1}, logits (1,0,0): -(0.5 ln p0 + 0.5 ln p1)
        let z = 1f64.exp() + 2.0;
        let want = -(0.5 * (1f64.exp() / z).ln() + 0.5 * (1.0 / z).ln());
        let (l, _) = species_ce(&[1.0, 0.0, 0.0], &[0, 1]).unwrap();
        assert!((l - want).abs() < 1e-10);
    }

    #[test]
    fn bad_targets_rejected() {
        assert!(species_ce(&[0.0; 3], &[]).is_err());
        assert!(species_ce(&[0.0; 3], &[3]).is_err());
        assert!(source_ce(&[0.0; 3], 5).is_err());
    }

    #[test]
    fn orthogonality_known_values() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 2.0;
        }
        assert!(orthogonality_loss(&eye, 1, 4, 4).unwrap().0.abs() < 1e-15);
        let same = [0.6, 0.8, 0.0].repeat(4);
        assert!((orthogonality_loss(&same, 1, 4, 3).unwrap().0 - 12.0).abs() < 1e-12);
        assert!(orthogonality_loss(&[0.0; 12], 1, 4, 3).is_err());
    }

    #[test]
    fn distillation_equals_entropy_for_matching_student() {
        let t = [0.2, -1.0, 0.7];
        let p = softmax(&t);
        let h = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        let (l, g) = distillation_loss(&t, &t).unwrap();
        assert!((l - h).abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let (l2, _) = distillation_loss(&t, &[0.0, 0.0, 0.0]).unwrap();
        assert!(l2 >= l);
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut state = AdamState::new(&[2]);
        let mut p = vec![1.0, -1.0];
        state.step(&mut [&mut p], &[&[0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);
        assert_eq!(state.step, 1);

        let mut state = AdamState::new(&[2]);
        state.step(&mut [&mut p], &[&[3.0, -0.5]], 0.01).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((p[1] - (-1.0 + 0.01)).abs() < 1e-8);
        assert!(state.step(&mut [&mut p], &[&[f64::NAN, 0.0]], 0.01).is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let two = PhaseConfig::phase_two();
        assert_eq!(two.learning_rate, 3.20e-6);
        assert_eq!((two.mixup_n, two.dropout_rate, two.source_loss_weight), (0, 0.0, 0.0));
        assert_eq!(two.distill_loss_weight, 4.22);
        let cfg = PhaseConfig::from_toml_str("phase = \"two\"\nmax_steps = 5\n").unwrap();
        assert_eq!(cfg.phase, Phase::Two);
        assert_eq!(cfg.max_steps, 5);
        let err = PhaseConfig::from_toml_str("learning_rat = 1.0").unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("learning_rat"), "{err}");
        assert!(PhaseConfig::from_toml_str("distill_loss_weight = 1.0").is_err());
        assert!(PhaseConfig::from_toml_str("max_steps = 300001").is_err());
        let round = PhaseConfig::from_toml_str(&two.to_toml_string()).unwrap();
        assert_eq!(round, two);
    }
}

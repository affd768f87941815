//! Synthetic corpora: tone/AM "species" with a small taxonomy, and planted
//! bursts for peak-finder checks.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{write_manifest, write_wav, AnnotationSpan, AudioBuffer, RecordingMeta, Split, TARGET_SAMPLE_RATE};

/// Acoustic signature of one call type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Signature {
    pub freq_hz: f64,
    pub am_hz: f64,
    /// Modulation depth in [0, 1]; the envelope swings between `1 − depth` and 1.
    pub am_depth: f64,
    /// Linear frequency sweep over one call, in Hz.
    pub sweep_hz: f64,
    pub call_s: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesSpec {
    pub species: String,
    pub genus: String,
    pub family: String,
    pub order: String,
    #[serde(skip)]
    pub signature: Signature,
}

/// Eight species in four genera and two families, nested by frequency: the
/// families sit in separate bands with their own sweep and AM rate, genera
/// are offset by `genus_step` within a band and sibling species by
/// `species_step` within a genus.
pub fn nested_taxonomy(genus_step: f64, species_step: f64) -> Vec<SpeciesSpec> {
    let families = [("fam_a", 1500.0, 500.0, 10.0), ("fam_b", 5000.0, -1200.0, 14.0)];
    let mut out = Vec::new();
    for (fi, (family, base, sweep, am)) in families.iter().enumerate() {
        for g in 0..2 {
            for s in 0..2 {
                let idx = fi * 4 + g * 2 + s;
                out.push(SpeciesSpec {
                    species: format!("sp{idx}"),
                    genus: format!("gen{}", fi * 2 + g),
                    family: family.to_string(),
                    order: "ord".into(),
                    signature: Signature {
                        freq_hz: base * (1.0 + genus_step * g as f64) * (1.0 + species_step * s as f64),
                        am_hz: *am,
                        am_depth: 0.9,
                        sweep_hz: *sweep,
                        call_s: (0.4, 0.9),
                    },
                });
            }
        }
    }
    out
}

/// [`nested_taxonomy`] with genera 10% and siblings 2.5% apart.
pub fn desk_taxonomy() -> Vec<SpeciesSpec> {
    nested_taxonomy(0.10, 0.025)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub dataset: String,
    pub per_species: usize,
    /// How many of each species' recordings go to the eval split.
    pub eval_per_species: usize,
    pub min_s: f64,
    pub max_s: f64,
    pub noise_rms: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            dataset: "synth".into(),
            per_species: 50,
            eval_per_species: 10,
            min_s: 3.0,
            max_s: 30.0,
            noise_rms: 0.01,
            seed: 0,
        }
    }
}

/// One call: AM tone with a linear sweep and 10 ms raised-cosine edges.
fn render_call(out: &mut [f32], start: usize, len: usize, sig: &Signature, freq: f64, amp: f64, rate: f64) {
    let dur = len as f64 / rate;
    let ramp = (0.01 * rate) as usize;
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let t = i as f64 / rate;
        let phase = 2.0 * PI * (freq * t + 0.5 * sig.sweep_hz / dur * t * t);
        let am = 1.0 - sig.am_depth / 2.0 + sig.am_depth / 2.0 * (2.0 * PI * sig.am_hz * t).sin();
        let edge = if i < ramp {
            0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
        } else if len - i < ramp {
            0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        out[start + i] += (amp * am * edge * phase.sin()) as f32;
    }
}

fn white_noise<R: Rng + ?Sized>(len: usize, rms: f64, rng: &mut R) -> Vec<f32> {
    let normal = Normal::new(0.0, rms).unwrap();
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// A recording of repeated calls over white noise, with one annotation per call.
pub fn synth_recording<R: Rng + ?Sized>(
    species: &SpeciesSpec,
    duration_s: f64,
    noise_rms: f64,
    rng: &mut R,
) -> (AudioBuffer, Vec<AnnotationSpan>) {
    let rate = TARGET_SAMPLE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let mut samples = white_noise(n, noise_rms, rng);
    let sig = &species.signature;
    let mut spans = Vec::new();
    let mut t = rng.random_range(0.0..0.5);
    loop {
        let call = rng.random_range(sig.call_s.0..sig.call_s.1);
        if t + call > duration_s {
            break;
        }
        let freq = sig.freq_hz * rng.random_range(0.98..1.02);
        let amp = rng.random_range(0.15..0.4);
        render_call(&mut samples, (t * rate) as usize, (call * rate) as usize, sig, freq, amp, rate);
        spans.push(AnnotationSpan {
            start_s: t,
            end_s: t + call,
            label: species.species.clone(),
        });
        t += call + rng.random_range(0.2..1.0);
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    (AudioBuffer::new(samples, TARGET_SAMPLE_RATE), spans)
}

/// A synthesized recording with its manifest entry (path relative to the corpus root).
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub meta: RecordingMeta,
    pub audio: AudioBuffer,
}

/// Deterministic corpus: recording `k` of species `s` uses its own stream.
pub fn generate_corpus(species: &[SpeciesSpec], cfg: &CorpusConfig) -> Result<Vec<SynthItem>> {
    if cfg.eval_per_species > cfg.per_species || !(cfg.min_s > 0.0 && cfg.min_s <= cfg.max_s) {
        return Err(Error::Config(format!("invalid corpus config {cfg:?}")));
    }
    let mut items = Vec::with_capacity(species.len() * cfg.per_species);
    for (si, sp) in species.iter().enumerate() {
        for k in 0..cfg.per_species {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((si * cfg.per_species + k) as u64);
            let duration = if cfg.min_s == cfg.max_s {
                cfg.min_s
            } else {
                rng.random_range(cfg.min_s..cfg.max_s)
            };
            let (audio, spans) = synth_recording(sp, duration, cfg.noise_rms, &mut rng);
            let id = format!("{}_{}_{k:03}", cfg.dataset, sp.species);
            let split = if k < cfg.per_species - cfg.eval_per_species {
                Split::Train
            } else {
                Split::Eval
            };
            items.push(SynthItem {
                meta: RecordingMeta {
                    recording_id: id.clone(),
                    path: PathBuf::from(format!("{id}.wav")),
                    labels: vec![sp.species.clone()],
                    dataset: cfg.dataset.clone(),
                    split,
                    annotations: Some(spans),
                },
                audio,
            });
        }
    }
    Ok(items)
}

/// Write WAVs plus `train.jsonl`, `eval.jsonl` and `all.jsonl` manifests into `dir`.
pub fn write_corpus(dir: &Path, items: &[SynthItem]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for item in items {
        write_wav(dir.join(&item.meta.path), &item.audio)?;
    }
    let metas: Vec<RecordingMeta> = items.iter().map(|i| i.meta.clone()).collect();
    let by_split = |s: Split| metas.iter().filter(|m| m.split == s).cloned().collect::<Vec<_>>();
    write_manifest(dir.join("train.jsonl"), &by_split(Split::Train))?;
    write_manifest(dir.join("eval.jsonl"), &by_split(Split::Eval))?;
    write_manifest(dir.join("all.jsonl"), &metas)
}

pub fn write_taxonomy(path: &Path, species: &[SpeciesSpec]) -> Result<()> {
    let mut text = String::new();
    for sp in species {
        text.push_str(&serde_json::to_string(sp).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// White noise with one tone burst whose RMS is `snr_db` above the noise RMS.
pub fn planted_burst<R: Rng + ?Sized>(
    duration_s: f64,
    center_s: f64,
    burst_s: f64,
    snr_db: f64,
    noise_rms: f64,
    rng: &mut R,
) -> AudioBuffer {
    let rate = TARGET_SAMPLE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let mut samples = white_noise(n, noise_rms, rng);
    let amp = noise_rms * 10f64.powf(snr_db / 20.0) * 2f64.sqrt();
    let freq = rng.random_range(1500.0..6000.0);
    let sig = Signature {
        freq_hz: freq,
        am_hz: 0.0,
        am_depth: 0.0,
        sweep_hz: 0.0,
        call_s: (burst_s, burst_s),
    };
    let start = ((center_s - burst_s / 2.0) * rate).round().max(0.0) as usize;
    let len = (burst_s * rate) as usize;
    render_call(&mut samples, start, len, &sig, freq, amp, rate);
    AudioBuffer::new(samples, TARGET_SAMPLE_RATE)
}

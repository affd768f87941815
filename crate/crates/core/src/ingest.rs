//! Manifest loading, WAV decoding/resampling and label vocabularies.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every decoded buffer is converted to.
pub const TARGET_SAMPLE_RATE: u32 = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// A labelled time span inside a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    #[serde(rename = "id")]
    pub recording_id: String,
    pub path: PathBuf,
    pub labels: Vec<String>,
    pub dataset: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<AnnotationSpan>>,
}

impl RecordingMeta {
    /// Audio path, resolved against the manifest directory when relative.
    pub fn resolved_path(&self, base_dir: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base_dir.join(&self.path)
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.recording_id.is_empty() {
            return Err("empty id".into());
        }
        if self.split == Split::Train && self.labels.is_empty() {
            return Err(format!("train record {} has no labels", self.recording_id));
        }
        for span in self.annotations.iter().flatten() {
            if !(span.start_s >= 0.0) || !span.end_s.is_finite() || span.end_s <= span.start_s {
                return Err(format!(
                    "record {}: bad annotation span [{}, {}] for {}",
                    self.recording_id, span.start_s, span.end_s, span.label
                ));
            }
        }
        Ok(())
    }

    /// Check annotation spans against the decoded duration.
    pub fn validate_duration(&self, duration_s: f64) -> Result<()> {
        for span in self.annotations.iter().flatten() {
            // one-sample slack for spans written from rounded durations
            if span.end_s > duration_s + 1.0 / TARGET_SAMPLE_RATE as f64 {
                return Err(Error::Validation(format!(
                    "record {}: span [{}, {}] ends after recording ({duration_s} s)",
                    self.recording_id, span.start_s, span.end_s
                )));
            }
        }
        Ok(())
    }
}

/// Read a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<RecordingMeta>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordingMeta = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        if !seen.insert(rec.recording_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate recording id {}",
                path.display(),
                i + 1,
                rec.recording_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[RecordingMeta]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mono audio, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy `len` samples starting at `start`, zero-padding past the end.
    pub fn padded_slice(&self, start: usize, len: usize) -> Vec<f32> {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            out[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        out
    }
}

/// Decode a PCM WAV file, average its channels and resample to `target_rate`.
pub fn decode_and_resample(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    if interleaved.len() < channels {
        return Err(Error::Audio(format!("{}: zero-length audio", path.display())));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    let samples = resample(&mono, spec.sample_rate, target_rate);
    Ok(AudioBuffer::new(samples, target_rate))
}

/// Write a mono 16-bit PCM WAV.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

const RESAMPLE_ZERO_CROSSINGS: usize = 32; // 64 taps per phase
const KAISER_BETA: f64 = 8.6;
const RESAMPLE_ROLLOFF: f64 = 0.945;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Polyphase Kaiser-windowed sinc resampler. Equal rates return the input unchanged.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let g = gcd(from_rate as u64, to_rate as u64);
    let up = (to_rate as u64 / g) as usize; // L
    let down = (from_rate as u64 / g) as usize; // M
    // cutoff relative to the input Nyquist, in units of input samples
    let scale = (up as f64 / down as f64).min(1.0);
    let fc = scale * RESAMPLE_ROLLOFF;
    let half_width = (RESAMPLE_ZERO_CROSSINGS as f64 / scale).ceil() as isize;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |t: f64| -> f64 {
        let r = t / half_width as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let win = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
        let x = fc * t;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        fc * sinc * win
    };
    // table[phase][tap] for source offsets -half_width+1 ..= half_width
    let taps = (2 * half_width) as usize;
    let table: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|k| kernel(k as f64 - (half_width - 1) as f64 - frac))
                .collect()
        })
        .collect();

    let out_len = ((input.len() as u64 * up as u64 + down as u64 - 1) / down as u64) as usize;
    let n_in = input.len() as isize;
    (0..out_len)
        .map(|n| {
            let num = n as u64 * down as u64;
            let base = (num / up as u64) as isize;
            let phase = (num % up as u64) as usize;
            let coeffs = &table[phase];
            let first = base - (half_width - 1);
            let mut acc = 0.0;
            for (k, &c) in coeffs.iter().enumerate() {
                let idx = first + k as isize;
                if idx >= 0 && idx < n_in {
                    acc += c * input[idx as usize] as f64;
                }
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonLevel {
    Species,
    Genus,
    Family,
    Order,
}

impl std::str::FromStr for TaxonLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "species" => Ok(Self::Species),
            "genus" => Ok(Self::Genus),
            "family" => Ok(Self::Family),
            "order" => Ok(Self::Order),
            other => Err(Error::Config(format!(
                "unknown taxon level {other:?} (species|genus|family|order)"
            ))),
        }
    }
}

/// Ancestors of one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxon {
    pub genus: String,
    pub family: String,
    pub order: String,
}

impl Taxon {
    fn at(&self, level: TaxonLevel) -> Option<&str> {
        match level {
            TaxonLevel::Species => None,
            TaxonLevel::Genus => Some(&self.genus),
            TaxonLevel::Family => Some(&self.family),
            TaxonLevel::Order => Some(&self.order),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TaxonomyRow {
    species: String,
    genus: String,
    family: String,
    order: String,
}

/// Read a JSON-lines taxonomy table (`species, genus, family, order`).
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<HashMap<String, Taxon>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TaxonomyRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(
            row.species,
            Taxon {
                genus: row.genus,
                family: row.family,
                order: row.order,
            },
        );
    }
    Ok(out)
}

/// Ordered class list with a name → id index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    classes: Vec<String>,
    index: HashMap<String, usize>,
    level: TaxonLevel,
    taxonomy: Option<HashMap<String, Taxon>>,
}

impl LabelVocabulary {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate class {c}")));
            }
        }
        Ok(Self {
            classes,
            index,
            level: TaxonLevel::Species,
            taxonomy: None,
        })
    }

    /// Sorted union of all labels in `records`.
    pub fn from_records(records: &[RecordingMeta]) -> Self {
        let set: BTreeSet<&String> = records.iter().flat_map(|r| r.labels.iter()).collect();
        Self::new(set.into_iter().cloned().collect()).expect("set has unique names")
    }

    pub fn with_taxonomy(mut self, taxonomy: HashMap<String, Taxon>) -> Self {
        self.taxonomy = Some(taxonomy);
        self
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn level(&self) -> TaxonLevel {
        self.level
    }

    pub fn taxonomy(&self) -> Option<&HashMap<String, Taxon>> {
        self.taxonomy.as_ref()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require_id(&self, name: &str) -> Result<usize> {
        self.id(name)
            .ok_or_else(|| Error::Validation(format!("unknown label {name}")))
    }

    /// Name of `class`'s ancestor at `level` (which must not be finer than the vocabulary).
    pub fn ancestor(&self, class: &str, level: TaxonLevel) -> Result<String> {
        if level == self.level {
            return Ok(class.to_string());
        }
        if level < self.level {
            return Err(Error::Validation(format!(
                "cannot refine {:?} vocabulary to {level:?}",
                self.level
            )));
        }
        self.taxonomy
            .as_ref()
            .and_then(|t| t.get(class))
            .and_then(|t| t.at(level))
            .map(str::to_string)
            .ok_or_else(|| Error::Validation(format!("missing taxonomy entry for class {class}")))
    }
}

/// Map every class to its ancestor at `level`. Returns the coarse vocabulary
/// (sorted ancestor names) and the old id → new id table.
pub fn coarsen_labels(
    vocab: &LabelVocabulary,
    level: TaxonLevel,
) -> Result<(LabelVocabulary, Vec<usize>)> {
    if level == vocab.level {
        return Ok((vocab.clone(), (0..vocab.len()).collect()));
    }
    let names = vocab
        .classes
        .iter()
        .map(|c| vocab.ancestor(c, level))
        .collect::<Result<Vec<_>>>()?;
    let distinct: BTreeSet<&String> = names.iter().collect();
    let mut coarse = LabelVocabulary::new(distinct.into_iter().cloned().collect())?;
    coarse.level = level;
    // carry the remaining ancestry so coarsening composes
    let tax = vocab.taxonomy.as_ref().expect("ancestor() succeeded");
    let mut coarse_tax = HashMap::new();
    for (old, new_name) in vocab.classes.iter().zip(&names) {
        let t = &tax[old];
        coarse_tax.entry(new_name.clone()).or_insert_with(|| Taxon {
            genus: if level <= TaxonLevel::Genus { t.genus.clone() } else { new_name.clone() },
            family: if level <= TaxonLevel::Family { t.family.clone() } else { new_name.clone() },
            order: t.order.clone(),
        });
    }
    coarse.taxonomy = Some(coarse_tax);
    let mapping = names.iter().map(|n| coarse.index[n]).collect();
    Ok((coarse, mapping))
}

/// Rewrite record labels to their ancestors at `level` (deduplicated, order kept).
pub fn relabel_records(
    records: &[RecordingMeta],
    vocab: &LabelVocabulary,
    level: TaxonLevel,
) -> Result<Vec<RecordingMeta>> {
    records
        .iter()
        .map(|r| {
            let mut labels: Vec<String> = Vec::with_capacity(r.labels.len());
            for l in &r.labels {
                let a = vocab.ancestor(l, level)?;
                if !labels.contains(&a) {
                    labels.push(a);
                }
            }
            let annotations = r
                .annotations
                .as_ref()
                .map(|spans| {
                    spans
                        .iter()
                        .map(|s| {
                            Ok(AnnotationSpan {
                                label: vocab.ancestor(&s.label, level)?,
                                ..s.clone()
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            Ok(RecordingMeta {
                labels,
                annotations,
                ..r.clone()
            })
        })
        .collect()
}

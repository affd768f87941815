//! Python bindings for the chirpbed core crate.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chirpbed::augment::{sample_mixture_spec, MixupConfig};
use chirpbed::eval::{self, ScoredExample};
use chirpbed::frontend::{Frontend, FrontendConfig};
use chirpbed::harness::checkpoint::Checkpoint as CoreCheckpoint;
use chirpbed::harness::container::EmbeddingsFile as CoreEmbeddings;
use chirpbed::harness::pipeline::embed_audio;
use chirpbed::ingest::{self, AudioBuffer, TARGET_SAMPLE_RATE};
use chirpbed::windowing;

create_exception!(chirpbed_py, ChirpbedError, PyException);

fn to_py(e: chirpbed::Error) -> PyErr {
    match e {
        chirpbed::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        chirpbed::Error::Config(_) | chirpbed::Error::Usage(_) | chirpbed::Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => ChirpbedError::new_err(other.to_string()),
    }
}

fn at_target_rate(samples: Vec<f32>, sample_rate: u32) -> AudioBuffer {
    if sample_rate == TARGET_SAMPLE_RATE {
        AudioBuffer::new(samples, sample_rate)
    } else {
        AudioBuffer::new(ingest::resample(&samples, sample_rate, TARGET_SAMPLE_RATE), TARGET_SAMPLE_RATE)
    }
}

/// Log-mel spectrogram of mono audio as `(frames, bins, values)`, values row-major.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=32000))]
fn logmel(py: Python<'_>, samples: Vec<f32>, sample_rate: u32) -> PyResult<(usize, usize, Vec<f64>)> {
    let spec = py
        .detach(|| {
            let audio = at_target_rate(samples, sample_rate);
            Frontend::new(FrontendConfig::default())?.compute(&audio)
        })
        .map_err(to_py)?;
    Ok((spec.frames, spec.bins, spec.values))
}

#[pyfunction]
fn resample(samples: Vec<f32>, from_rate: u32, to_rate: u32) -> Vec<f32> {
    ingest::resample(&samples, from_rate, to_rate)
}

/// Decode a WAV file and resample it to 32 kHz.
#[pyfunction]
fn load_audio(path: &str) -> PyResult<Vec<f32>> {
    Ok(ingest::decode_and_resample(path, TARGET_SAMPLE_RATE).map_err(to_py)?.samples)
}

fn scored(scores: &[f64], labels: &[bool]) -> PyResult<Vec<ScoredExample>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores.iter().zip(labels).map(|(&s, &l)| ScoredExample::new(s, l)).collect())
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::roc_auc(&scored(&scores, &labels)?).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&scored(&scores, &labels)?).map_err(to_py)
}

/// Energy-peak candidates as `(time_s, score)`, best first.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=32000))]
fn energy_peaks(py: Python<'_>, samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<(f64, f64)>> {
    let peaks = py
        .detach(|| windowing::find_energy_peaks(&at_target_rate(samples, sample_rate)))
        .map_err(to_py)?;
    Ok(peaks.into_iter().map(|p| (p.time_s, p.score)).collect())
}

#[pyfunction]
#[pyo3(signature = (duration_s, window_s=5.0, stride_s=5.0))]
fn window_starts(duration_s: f64, window_s: f64, stride_s: f64) -> PyResult<Vec<f64>> {
    if !(duration_s > 0.0 && window_s > 0.0 && stride_s > 0.0) {
        return Err(PyValueError::new_err("durations and stride must be > 0"));
    }
    Ok(windowing::enumerate_windows(duration_s, window_s, stride_s))
}

/// Mixture weights for one mixup example (length is the component count).
#[pyfunction]
#[pyo3(signature = (n=2, alpha=91.3, beta=100.0, omega=1.0, seed=0))]
fn mixture_weights(n: u32, alpha: f64, beta: f64, omega: f64, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = MixupConfig { n, alpha, beta, omega };
    sample_mixture_spec(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)
}

#[pyfunction]
fn geometric_mean(values: Vec<f64>) -> f64 {
    eval::geometric_mean(&values)
}

/// A trained model loaded from a BCK1 checkpoint.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
    sha256: String,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, sum) = CoreCheckpoint::read(path).map_err(to_py)?;
        let sha256 = sum.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { inner, sha256 })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.header.classes.clone()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.params.dims.d
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.header.steps
    }

    #[getter]
    fn sha256(&self) -> String {
        self.sha256.clone()
    }

    /// Mean embedding of each 5 s window at `stride_s`.
    #[pyo3(signature = (samples, sample_rate=32000, stride_s=5.0))]
    fn embed(&self, py: Python<'_>, samples: Vec<f32>, sample_rate: u32, stride_s: f64) -> PyResult<Vec<Vec<f32>>> {
        if !(stride_s > 0.0) || samples.is_empty() {
            return Err(PyValueError::new_err("need audio and a positive stride"));
        }
        let windows = py
            .detach(|| {
                let audio = at_target_rate(samples, sample_rate);
                let fe = Frontend::new(FrontendConfig::default())?;
                embed_audio(&fe, &self.inner.params, "py", &audio, stride_s)
            })
            .map_err(to_py)?;
        Ok(windows.into_iter().map(|w| w.mean).collect())
    }

    /// Linear-head logits for every 5 s window.
    #[pyo3(signature = (samples, sample_rate=32000, stride_s=5.0))]
    fn logits(&self, py: Python<'_>, samples: Vec<f32>, sample_rate: u32, stride_s: f64) -> PyResult<Vec<Vec<f64>>> {
        let means = self.embed(py, samples, sample_rate, stride_s)?;
        Ok(means
            .iter()
            .map(|m| {
                let m: Vec<f64> = m.iter().map(|&v| v as f64).collect();
                chirpbed::model::linear_logits(&m, &self.inner.params)
            })
            .collect())
    }
}

/// Read-only view of a BEK1 embeddings file.
#[pyclass(frozen)]
struct Embeddings {
    inner: CoreEmbeddings,
}

#[pymethods]
impl Embeddings {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreEmbeddings::read(path).map_err(to_py)? })
    }

    #[getter]
    fn dim(&self) -> u32 {
        self.inner.d
    }

    #[getter]
    fn stride_s(&self) -> f32 {
        self.inner.stride_s
    }

    fn recording_ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.recording_id.clone()).collect()
    }

    /// Average of a recording's window mean embeddings.
    fn recording_mean(&self, recording_id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .record(recording_id)
            .map(|r| r.recording_mean())
            .ok_or_else(|| PyValueError::new_err(format!("no recording {recording_id:?}")))
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

#[pymodule]
fn chirpbed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ChirpbedError", m.py().get_type::<ChirpbedError>())?;
    m.add("SAMPLE_RATE", TARGET_SAMPLE_RATE)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(load_audio, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(energy_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(window_starts, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_weights, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_mean, m)?)?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Embeddings>()?;
    Ok(())
}

//! Log-mel spectrogram frontend.
//!
//! Uncentered Hann-windowed STFT, magnitude spectrum scaled by the reciprocal
//! of the window sum, HTK-mel triangular filterbank with unit peaks, natural
//! log with a floor, then a constant output scale. The signal tail is
//! zero-padded so that `ceil(samples / hop)` frames are produced.

use std::sync::Arc;

use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AudioBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub output_scale: f64,
    /// Number of samples a model input must have.
    pub input_samples: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            window_len: 640,
            hop: 320,
            fft_len: 1024,
            mel_bins: 128,
            fmin: 60.0,
            fmax: 16_000.0,
            log_floor: 1e-5,
            output_scale: 0.1,
            input_samples: 160_000,
        }
    }
}

impl FrontendConfig {
    /// Spectrogram settings used by energy-peak window selection:
    /// 80 ms window, 10 ms hop, log floor 0.01.
    pub fn peak_finding() -> Self {
        Self {
            window_len: 2560,
            fft_len: 4096,
            log_floor: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_len < self.window_len {
            return Err(Error::Config("fft_len must be >= window_len".into()));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(Error::Config(format!(
                "mel range [{}, {}] invalid for rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.hop == 0 || self.window_len == 0 || self.mel_bins == 0 || !(self.log_floor > 0.0) {
            return Err(Error::Config("hop, window_len, mel_bins and log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    /// Lowest value any cell can take.
    pub fn floor_value(&self) -> f64 {
        self.output_scale * self.log_floor.ln()
    }
}

/// frames × mel_bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
    pub frame_rate: f64,
}

impl LogMelSpectrogram {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, b: usize) -> f64 {
        self.values[t * self.bins + b]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter stored sparsely from `start` (FFT bin index).
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

/// HTK-mel filterbank: `mel_bins` triangles with edges linearly spaced in mel
/// between fmin and fmax, unit peak, evaluated at FFT bin frequencies.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<MelFilter> {
    let n_freqs = cfg.fft_len / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64)
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_len as f64;
    (0..cfg.mel_bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_freqs {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            MelFilter {
                start: start.unwrap_or(0),
                weights,
                center_hz: mel_to_hz(center),
            }
        })
        .collect()
}

/// Periodic Hann window (the SciPy `get_window("hann", n)` convention).
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable frontend with a planned FFT and a precomputed filterbank.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    inv_window_sum: f64,
    filters: Vec<MelFilter>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let window = hann_window(cfg.window_len);
        let inv_window_sum = 1.0 / window.iter().sum::<f64>();
        let filters = mel_filterbank(&cfg);
        let fft = RealFftPlanner::new().plan_fft_forward(cfg.fft_len);
        Ok(Self {
            cfg,
            window,
            inv_window_sum,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    /// Spectrogram of an arbitrary-length signal.
    pub fn spectrogram(&self, samples: &[f32]) -> LogMelSpectrogram {
        let cfg = &self.cfg;
        let frames = cfg.frames_for(samples.len());
        let n_freqs = cfg.fft_len / 2 + 1;
        let mut buf = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        let mut mag = vec![0.0f64; n_freqs];
        let mut values = Vec::with_capacity(frames * cfg.mel_bins);
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.fill(0.0);
            for (i, slot) in buf[..cfg.window_len].iter_mut().enumerate() {
                *slot = samples.get(start + i).map_or(0.0, |&s| s as f64 * self.window[i]);
            }
            self.fft
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("buffer lengths come from the plan");
            for (m, c) in mag.iter_mut().zip(&spectrum) {
                *m = (c.re * c.re + c.im * c.im).sqrt() * self.inv_window_sum;
            }
            for f in &self.filters {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&mag[f.start..])
                    .map(|(w, m)| w * m)
                    .sum();
                values.push(cfg.output_scale * e.max(cfg.log_floor).ln());
            }
        }
        LogMelSpectrogram {
            frames,
            bins: cfg.mel_bins,
            values,
            frame_rate: cfg.sample_rate as f64 / cfg.hop as f64,
        }
    }

    /// Model-input spectrogram; the buffer must be exactly `input_samples` at the configured rate.
    pub fn compute(&self, audio: &AudioBuffer) -> Result<LogMelSpectrogram> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(Error::Shape(format!(
                "expected {} Hz audio, got {} Hz",
                self.cfg.sample_rate, audio.sample_rate
            )));
        }
        if audio.samples.len() != self.cfg.input_samples {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                self.cfg.input_samples,
                audio.samples.len()
            )));
        }
        Ok(self.spectrogram(&audio.samples))
    }
}

/// One-shot convenience wrapper around [`Frontend::compute`].
pub fn compute_logmel(audio: &AudioBuffer, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    Frontend::new(cfg.clone())?.compute(audio)
}

//! Training-window selection (uniform random or energy-peak based) and
//! strided evaluation windows.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig, LogMelSpectrogram};
use crate::ingest::AudioBuffer;

pub const TRAIN_WINDOW_S: f64 = 5.0;
pub const PEAK_WINDOW_S: f64 = 6.0;
pub const MAX_PEAKS: usize = 5;

const EPS_S: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub recording_id: String,
    pub start_s: f64,
    pub duration_s: f64,
}

impl WindowSpec {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    /// Samples of this window from `audio`, zero-padded past the end.
    pub fn extract(&self, audio: &AudioBuffer) -> Vec<f32> {
        let rate = audio.sample_rate as f64;
        let start = (self.start_s * rate).round() as usize;
        let len = (self.duration_s * rate).round() as usize;
        audio.padded_slice(start, len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakCandidate {
    pub time_s: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStrategy {
    Random,
    Peak,
}

impl std::str::FromStr for WindowStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "peak" => Ok(Self::Peak),
            other => Err(Error::Config(format!("unknown window strategy {other:?} (random|peak)"))),
        }
    }
}

/// Peak-finding spectrogram: 80 ms window, 10 ms hop, log floor 0.01, scale 0.1.
pub fn peak_mel(audio: &AudioBuffer) -> Result<LogMelSpectrogram> {
    if audio.samples.is_empty() {
        return Err(Error::Audio("empty audio".into()));
    }
    let cfg = FrontendConfig {
        sample_rate: audio.sample_rate,
        fmax: FrontendConfig::peak_finding().fmax.min(audio.sample_rate as f64 / 2.0),
        ..FrontendConfig::peak_finding()
    };
    Ok(Frontend::new(cfg)?.spectrogram(&audio.samples))
}

fn mean_std<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let shift = *values.clone().next().unwrap();
    let mean = shift + values.clone().map(|v| v - shift).sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Two-step per-bin denoising. Output cells are either 0 or `value − mean₂`
/// for values above `mean₂ + 0.75·std₂`, where (mean₂, std₂) are computed
/// after discarding values above `mean + 1.5·std`.
pub fn denoise_mel(spec: &LogMelSpectrogram) -> LogMelSpectrogram {
    let mut out = vec![0.0; spec.values.len()];
    let mut column = Vec::with_capacity(spec.frames);
    for b in 0..spec.bins {
        column.clear();
        column.extend((0..spec.frames).map(|t| spec.get(t, b)));
        let (m1, s1) = mean_std(column.iter());
        let cut = m1 + 1.5 * s1;
        let (m2, s2) = mean_std(column.iter().filter(|&&v| v <= cut));
        let thresh = m2 + 0.75 * s2;
        for (t, &v) in column.iter().enumerate() {
            if v > thresh {
                out[t * spec.bins + b] = v - m2;
            }
        }
    }
    LogMelSpectrogram {
        values: out,
        ..spec.clone()
    }
}

/// Ricker (Mexican hat) wavelet sampled at `points` positions, SciPy normalization.
pub fn ricker(points: f64, width: f64) -> Vec<f64> {
    let amp = 2.0 / ((3.0 * width).sqrt() * std::f64::consts::PI.powf(0.25));
    let wsq = width * width;
    let len = points.ceil() as usize;
    (0..len)
        .map(|i| {
            let x = i as f64 - (points - 1.0) / 2.0;
            let xsq = x * x;
            amp * (1.0 - xsq / wsq) * (-xsq / (2.0 * wsq)).exp()
        })
        .collect()
}

/// 'same'-mode linear convolution through the FFT. Outputs within the
/// transform's round-off bound are flushed to exactly zero.
fn convolve_same(data: &[f64], kernel: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let full = data.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())) * kernel.iter().map(|k| k.abs()).sum::<f64>();
    let tol = 1e-12 * scale;
    let offset = (kernel.len() - 1) / 2;
    a[offset..offset + data.len()]
        .iter()
        .map(|c| {
            let v = c.re / n as f64;
            if v.abs() <= tol {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Continuous wavelet transform with Ricker wavelets, one row per width.
pub fn cwt_ricker(data: &[f64], widths: &[f64]) -> Vec<Vec<f64>> {
    let mut planner = FftPlanner::new();
    widths
        .iter()
        .map(|&w| {
            let points = (10.0 * w).min(data.len() as f64);
            let kernel = ricker(points, w);
            convolve_same(data, &kernel, &mut planner)
        })
        .collect()
}

/// Ridge-line parameters for [`find_peaks_cwt`].
#[derive(Debug, Clone, PartialEq)]
pub struct CwtPeakConfig {
    pub widths: Vec<f64>,
    /// Max column distance when linking a ridge to the next row, per row.
    pub max_distances: Vec<f64>,
    /// Rows a ridge may skip before it is closed.
    pub gap_thresh: usize,
    pub min_length: usize,
    pub min_snr: f64,
    pub noise_perc: f64,
}

impl CwtPeakConfig {
    /// `count` linearly spaced widths over `[lo, hi]` with the default ridge rules.
    pub fn linear(lo: f64, hi: f64, count: usize) -> Self {
        let widths: Vec<f64> = (0..count)
            .map(|i| {
                if count == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (count - 1) as f64
                }
            })
            .collect();
        let max_distances = widths.iter().map(|w| w / 4.0).collect();
        Self {
            widths,
            max_distances,
            gap_thresh: 2,
            min_length: 3,
            min_snr: 1.0,
            noise_perc: 10.0,
        }
    }
}

struct Ridge {
    rows: Vec<usize>,
    cols: Vec<usize>,
    gap: usize,
}

fn relative_maxima(row: &[f64]) -> Vec<usize> {
    (1..row.len().saturating_sub(1))
        .filter(|&i| row[i] > row[i - 1] && row[i] > row[i + 1])
        .collect()
}

fn identify_ridge_lines(cwt: &[Vec<f64>], max_distances: &[f64], gap_thresh: usize) -> Vec<Ridge> {
    let maxima: Vec<Vec<usize>> = cwt.iter().map(|r| relative_maxima(r)).collect();
    let Some(start_row) = maxima.iter().rposition(|m| !m.is_empty()) else {
        return Vec::new();
    };
    let mut active: Vec<Ridge> = maxima[start_row]
        .iter()
        .map(|&c| Ridge {
            rows: vec![start_row],
            cols: vec![c],
            gap: 0,
        })
        .collect();
    let mut closed = Vec::new();
    for row in (0..start_row).rev() {
        for r in active.iter_mut() {
            r.gap += 1;
        }
        let prev_cols: Vec<usize> = active.iter().map(|r| *r.cols.last().unwrap()).collect();
        for &col in &maxima[row] {
            let closest = prev_cols
                .iter()
                .enumerate()
                .map(|(i, &pc)| (i, col.abs_diff(pc)))
                .min_by_key(|&(_, d)| d);
            match closest {
                Some((i, d)) if d as f64 <= max_distances[row] => {
                    let r = &mut active[i];
                    r.rows.push(row);
                    r.cols.push(col);
                    r.gap = 0;
                }
                _ => active.push(Ridge {
                    rows: vec![row],
                    cols: vec![col],
                    gap: 0,
                }),
            }
        }
        let mut i = active.len();
        while i > 0 {
            i -= 1;
            if active[i].gap > gap_thresh {
                closed.push(active.remove(i));
            }
        }
    }
    closed.extend(active);
    closed
}

fn percentile(values: &[f64], perc: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = perc / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Peak indices located by ridge lines through the Ricker CWT, filtered by
/// ridge length and a signal-to-noise estimate on the smallest-width row.
pub fn find_peaks_cwt(data: &[f64], cfg: &CwtPeakConfig) -> Vec<usize> {
    if data.len() < 3 || cfg.widths.is_empty() {
        return Vec::new();
    }
    let cwt = cwt_ricker(data, &cfg.widths);
    let ridges = identify_ridge_lines(&cwt, &cfg.max_distances, cfg.gap_thresh);

    let n = data.len();
    let window = n.div_ceil(20);
    let (half, odd) = (window / 2, window % 2);
    let row0 = &cwt[0];
    let noises: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + odd).min(n);
            percentile(&row0[lo..hi], cfg.noise_perc)
        })
        .collect();

    let mut peaks: Vec<usize> = ridges
        .iter()
        .filter(|r| r.rows.len() >= cfg.min_length)
        .filter_map(|r| {
            // point on the smallest-width row reached by the ridge
            let k = (0..r.rows.len()).min_by_key(|&k| r.rows[k]).unwrap();
            let (row, col) = (r.rows[k], r.cols[k]);
            let snr = (cwt[row][col] / noises[col]).abs();
            (snr >= cfg.min_snr).then_some(col)
        })
        .collect();
    peaks.sort_unstable();
    peaks.dedup();
    peaks
}

/// Energy-peak candidates: denoised peak spectrogram summed over frequency,
/// CWT peaks over 0.5–2 s, gated by 600 ms-window energy and capped at five.
pub fn find_energy_peaks(audio: &AudioBuffer) -> Result<Vec<PeakCandidate>> {
    let rate = audio.sample_rate as usize;
    let min_len = (PEAK_WINDOW_S * rate as f64) as usize;
    let padded;
    let audio = if audio.samples.len() < min_len {
        padded = AudioBuffer::new(audio.padded_slice(0, min_len), audio.sample_rate);
        &padded
    } else {
        audio
    };
    let spec = denoise_mel(&peak_mel(audio)?);
    let summed: Vec<f64> = (0..spec.frames).map(|t| spec.row(t).iter().sum()).collect();
    let frame_rate = spec.frame_rate;
    let frames_per = |s: f64| s * frame_rate;
    let cwt_cfg = CwtPeakConfig::linear(frames_per(0.5), frames_per(2.0), 10);
    let locs = find_peaks_cwt(&summed, &cwt_cfg);

    let mean = summed.iter().sum::<f64>() / summed.len() as f64;
    let half = frames_per(0.3).round() as usize;
    let window_offset = FrontendConfig::peak_finding().window_len as f64 / 2.0 / rate as f64;
    let mut peaks: Vec<PeakCandidate> = locs
        .into_iter()
        .filter_map(|p| {
            let lo = p.saturating_sub(half);
            let hi = (p + half).min(summed.len());
            let score: f64 = summed[lo..hi].iter().sum();
            (score > 0.0 && score >= 1.5 * mean).then(|| PeakCandidate {
                time_s: p as f64 / frame_rate + window_offset,
                score,
            })
        })
        .collect();
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.time_s.total_cmp(&b.time_s)));
    peaks.truncate(MAX_PEAKS);
    Ok(peaks)
}

/// Pick a 5 s training window given precomputed peaks (ignored for `Random`).
pub fn select_window_from_peaks<R: Rng + ?Sized>(
    recording_id: &str,
    duration_s: f64,
    peaks: &[PeakCandidate],
    strategy: WindowStrategy,
    rng: &mut R,
) -> WindowSpec {
    let start_s = match strategy {
        WindowStrategy::Random => {
            let span = duration_s - TRAIN_WINDOW_S;
            if span > 0.0 {
                rng.random_range(0.0..=span)
            } else {
                0.0
            }
        }
        WindowStrategy::Peak => {
            let padded = duration_s.max(PEAK_WINDOW_S);
            let outer = if peaks.is_empty() {
                0.0
            } else {
                let p = &peaks[rng.random_range(0..peaks.len())];
                (p.time_s - PEAK_WINDOW_S / 2.0).clamp(0.0, padded - PEAK_WINDOW_S)
            };
            outer + rng.random_range(0.0..=PEAK_WINDOW_S - TRAIN_WINDOW_S)
        }
    };
    WindowSpec {
        recording_id: recording_id.to_string(),
        start_s,
        duration_s: TRAIN_WINDOW_S,
    }
}

pub fn select_training_window<R: Rng + ?Sized>(
    recording_id: &str,
    audio: &AudioBuffer,
    strategy: WindowStrategy,
    rng: &mut R,
) -> Result<WindowSpec> {
    let peaks = match strategy {
        WindowStrategy::Peak => find_energy_peaks(audio)?,
        WindowStrategy::Random => Vec::new(),
    };
    Ok(select_window_from_peaks(recording_id, audio.duration_s(), &peaks, strategy, rng))
}

/// Strided window starts covering `duration_s`, with a tail window flush
/// with the end when the stride leaves part of the recording uncovered.
pub fn enumerate_windows(duration_s: f64, window_s: f64, stride_s: f64) -> Vec<f64> {
    assert!(duration_s > 0.0 && stride_s > 0.0 && window_s > 0.0);
    if duration_s < window_s + EPS_S {
        return vec![0.0];
    }
    let mut starts = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * stride_s;
        if start + window_s > duration_s + EPS_S {
            break;
        }
        starts.push(start);
        k += 1;
    }
    let last_end = starts.last().unwrap() + window_s;
    if last_end < duration_s - EPS_S {
        starts.push(duration_s - window_s);
    }
    starts
}

pub fn enumerate_window_specs(
    recording_id: &str,
    duration_s: f64,
    window_s: f64,
    stride_s: f64,
) -> Vec<WindowSpec> {
    enumerate_windows(duration_s, window_s, stride_s)
        .into_iter()
        .map(|start_s| WindowSpec {
            recording_id: recording_id.to_string(),
            start_s,
            duration_s: window_s,
        })
        .collect()
}

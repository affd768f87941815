use std::f64::consts::PI;

/// Direct-DFT log-mel reference: 32 kHz, 640-sample periodic Hann, hop 320,
/// 1024-point transform, 128 HTK triangles over 60..16000 Hz, floor 1e-5, scale 0.1.
pub struct MelOracle {
    cos: Vec<f64>,
    sin: Vec<f64>,
    window: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

const N_FFT: usize = 1024;
const WIN: usize = 640;
const HOP: usize = 320;
const BINS: usize = 128;

fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

impl MelOracle {
    pub fn new() -> Self {
        let cos = (0..N_FFT).map(|i| (2.0 * PI * i as f64 / N_FFT as f64).cos()).collect();
        let sin = (0..N_FFT).map(|i| (2.0 * PI * i as f64 / N_FFT as f64).sin()).collect();
        let window = (0..WIN).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN as f64).cos()).collect();
        let (lo, hi) = (mel(60.0), mel(16000.0));
        let step = (hi - lo) / (BINS + 1) as f64;
        let weights = (0..BINS)
            .map(|m| {
                let (l, c, r) = (lo + step * m as f64, lo + step * (m + 1) as f64, lo + step * (m + 2) as f64);
                (0..=N_FFT / 2)
                    .map(|k| {
                        let x = mel(k as f64 * 32000.0 / N_FFT as f64);
                        let up = (x - l) / (c - l);
                        let down = (r - x) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { cos, sin, window, weights }
    }

    pub fn compute(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let frames = x.len().div_ceil(HOP);
        let wsum: f64 = self.window.iter().sum();
        (0..frames)
            .map(|t| {
                let seg: Vec<f64> = (0..WIN)
                    .map(|n| x.get(t * HOP + n).map_or(0.0, |&v| v as f64) * self.window[n])
                    .collect();
                let mag: Vec<f64> = (0..=N_FFT / 2)
                    .map(|k| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (n, &v) in seg.iter().enumerate() {
                            let idx = (k * n) % N_FFT;
                            re += v * self.cos[idx];
                            im -= v * self.sin[idx];
                        }
                        (re * re + im * im).sqrt() / wsum
                    })
                    .collect();
                self.weights
                    .iter()
                    .map(|w| {
                        let e: f64 = w.iter().zip(&mag).map(|(a, b)| a * b).sum();
                        0.1 * e.max(1e-5).ln()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        let (lo, hi) = (mel(60.0), mel(16000.0));
        let c = lo + (hi - lo) / (BINS + 1) as f64 * (m + 1) as f64;
        700.0 * (10f64.powf(c / 2595.0) - 1.0)
    }
}

/// Pairwise Mann-Whitney AUC: P(score_pos > score_neg) + ½ P(tie).
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Mean over positives of precision at the positive's rank, where item j
/// ranks ahead of item i when it scores higher or ties with a lower index.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut total = 0.0;
    let mut npos = 0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        npos += 1;
        let rank = (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let hits = (0..scores.len()).filter(|&j| labels[j] && ahead(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    total / npos as f64
}

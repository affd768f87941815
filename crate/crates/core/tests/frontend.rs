mod common;

use chirpbed::frontend::{compute_logmel, mel_filterbank, Frontend, FrontendConfig};
use chirpbed::ingest::AudioBuffer;
use common::oracles::MelOracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_audio(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rng.random_range(100.0..12000.0);
    let amp = rng.random_range(0.01..0.9);
    let noise = rng.random_range(0.0..0.2);
    (0..len)
        .map(|i| {
            let t = i as f64 / 32000.0;
            (amp * (2.0 * std::f64::consts::PI * f * t).sin() + noise * rng.random_range(-1.0..1.0)) as f32
        })
        .collect()
}

#[test]
fn matches_reference_oracle() {
    let oracle = MelOracle::new();
    let fe = Frontend::new(FrontendConfig::default()).unwrap();
    for seed in 0..3 {
        let x = random_audio(seed, 160_000);
        let got = fe.compute(&AudioBuffer::new(x.clone(), 32_000)).unwrap();
        let want = oracle.compute(&x);
        assert_eq!((got.frames, got.bins), (500, 128));
        for (t, row) in want.iter().enumerate() {
            for (b, &w) in row.iter().enumerate() {
                assert!((got.get(t, b) - w).abs() <= 1e-5, "seed {seed} cell ({t},{b})");
            }
        }
    }
}

#[test]
fn full_scale_1khz_peaks_at_nearest_center() {
    let oracle = MelOracle::new();
    let x: Vec<f32> = (0..160_000)
        .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 32000.0).sin() as f32)
        .collect();
    let spec = compute_logmel(&AudioBuffer::new(x, 32_000), &FrontendConfig::default()).unwrap();
    let nearest = (0..128)
        .min_by(|&a, &b| (oracle.center_hz(a) - 1000.0).abs().total_cmp(&(oracle.center_hz(b) - 1000.0).abs()))
        .unwrap();
    for t in 0..499 {
        let row = spec.row(t);
        let arg = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest, "frame {t}");
    }
}

#[test]
fn filters_are_nonnegative_and_in_band() {
    let cfg = FrontendConfig::default();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_len as f64;
    for f in mel_filterbank(&cfg) {
        assert!(f.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        if !f.weights.is_empty() {
            assert!(f.start as f64 * bin_hz >= cfg.fmin);
            assert!((f.start + f.weights.len() - 1) as f64 * bin_hz <= cfg.fmax);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn delay_by_one_hop_shifts_one_frame(seed in any::<u64>()) {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let x = random_audio(seed, 160_000);
        let mut delayed = vec![0.0f32; 320];
        delayed.extend_from_slice(&x[..160_000 - 320]);
        let a = fe.spectrogram(&x);
        let b = fe.spectrogram(&delayed);
        // frames fully inside the unpadded span of both signals
        for t in 0..497 {
            for k in 0..128 {
                prop_assert!((a.get(t, k) - b.get(t + 1, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gain_adds_log_gain_above_floor(seed in any::<u64>(), g in 1.01f64..20.0) {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let x: Vec<f32> = random_audio(seed, 32_000).iter().map(|v| v * 0.04).collect();
        let y: Vec<f32> = x.iter().map(|&v| (v as f64 * g) as f32).collect();
        let a = fe.spectrogram(&x);
        let b = fe.spectrogram(&y);
        let floor = FrontendConfig::default().floor_value();
        for (va, vb) in a.values.iter().zip(&b.values) {
            prop_assert!(*vb >= *va - 1e-6);
            prop_assert!(*va >= floor && *vb >= floor);
            if *va > floor + 1e-3 {
                prop_assert!((vb - va - 0.1 * g.ln()).abs() < 1e-4, "{} {} {}", va, vb, g);
            }
        }
    }
}

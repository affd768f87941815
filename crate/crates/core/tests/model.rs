mod common;

use chirpbed::frontend::LogMelSpectrogram;
use chirpbed::model::{embed, forward, init_params, prototype_logits, prototype_logits_with_argmax, ModelDims, Similarity};
use common::gradcheck::{case, dims};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_size_embedding_shapes() {
    let dims = ModelDims::new(8, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params(dims, &mut rng).unwrap();
    let spec = LogMelSpectrogram {
        frames: 500,
        bins: 128,
        values: (0..500 * 128).map(|_| rng.random_range(-1.2..0.0)).collect(),
        frame_rate: 100.0,
    };
    let (pair, out, _) = forward(&spec, &params, 0.0, None).unwrap();
    assert_eq!((pair.grid_t, pair.grid_f, pair.d), (5, 3, 64));
    assert_eq!(pair.spatial.len(), 15 * 64);
    assert_eq!(out.linear.len(), 8);
    assert_eq!(out.prototype.len(), 8);
    assert_eq!(out.source.len(), 20);
    let wrong = LogMelSpectrogram { frames: 499, values: vec![0.0; 499 * 128], ..spec };
    assert!(embed(&wrong, &params, 0.0, None).is_err());
}

#[test]
fn mean_embedding_is_cell_average() {
    for seed in 0..5 {
        let c = case(dims(16, Similarity::Dot), seed, 0.0);
        let (pair, _) = embed(&c.spec, &c.params, 0.0, None).unwrap();
        let cells = pair.grid_t * pair.grid_f;
        for k in 0..pair.d {
            let avg: f64 = (0..cells).map(|i| pair.spatial[i * pair.d + k]).sum::<f64>() / cells as f64;
            assert!((avg - pair.mean[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn inference_ignores_dropout_and_is_deterministic() {
    let c = case(dims(16, Similarity::Dot), 3, 0.0);
    let (a, oa, _) = forward(&c.spec, &c.params, 0.5, None).unwrap();
    let (b, ob, _) = forward(&c.spec, &c.params, 0.0, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(oa, ob);
}

#[test]
fn dropout_preserves_expected_linear_logits() {
    let c = case(dims(16, Similarity::Dot), 9, 0.0);
    let (_, clean, _) = forward(&c.spec, &c.params, 0.0, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let k = clean.linear.len();
    let (mut sum, mut sq) = (vec![0.0; k], vec![0.0; k]);
    for _ in 0..n {
        let (_, out, _) = forward(&c.spec, &c.params, 0.3, Some(&mut rng)).unwrap();
        for i in 0..k {
            sum[i] += out.linear[i];
            sq[i] += out.linear[i] * out.linear[i];
        }
    }
    for i in 0..k {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - clean.linear[i]).abs() < 3.0 * se, "logit {i}: {mean} vs {}", clean.linear[i]);
    }
}

#[test]
fn exact_ties_pick_first_prototype_and_cell() {
    let c = case(dims(16, Similarity::Dot), 1, 0.0);
    let spatial = vec![0.0; 15 * 16];
    let (logits, arg) = prototype_logits_with_argmax(&spatial, &c.params);
    assert!(logits.iter().all(|&l| l == 0.0));
    assert!(arg.iter().all(|&a| a == (0, 0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prototype_logits_ignore_cell_and_prototype_order(seed in any::<u64>(), cosine in any::<bool>(), shift in 1usize..15) {
        let sim = if cosine { Similarity::Cosine } else { Similarity::Dot };
        let mut c = case(dims(16, sim), seed % 1000, 0.0);
        let (pair, _) = embed(&c.spec, &c.params, 0.0, None).unwrap();
        let base = prototype_logits(&pair.spatial, &c.params);

        let d = pair.d;
        let mut rotated = pair.spatial.clone();
        rotated.rotate_left(shift * d);
        prop_assert_eq!(prototype_logits(&rotated, &c.params), base.clone());

        let per = c.params.dims.prototypes_per_class;
        for class in c.params.blocks.protos.chunks_mut(per * d) {
            class.rotate_left(d);
        }
        prop_assert_eq!(prototype_logits(&pair.spatial, &c.params), base);
    }

    #[test]
    fn cosine_logits_are_bounded(seed in any::<u64>()) {
        let c = case(dims(8, Similarity::Cosine), seed % 1000, 0.0);
        let (_, out, _) = forward(&c.spec, &c.params, 0.0, None).unwrap();
        for l in out.prototype {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        }
    }
}

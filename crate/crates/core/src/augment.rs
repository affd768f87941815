//! Generalized mixup over raw audio windows.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LabelVocabulary;

/// Component count is `BetaBinomial(n, alpha, beta) + 1`; weights are
/// symmetric-Dirichlet with concentration `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub n: u32,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
}

impl MixupConfig {
    pub const DISABLED: MixupConfig = MixupConfig {
        n: 0,
        alpha: 1.0,
        beta: 1.0,
        omega: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("omega", self.omega)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("mixup {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Mean of the beta-binomial component excess `N − 1`.
    pub fn mean_extra_components(&self) -> f64 {
        self.n as f64 * self.alpha / (self.alpha + self.beta)
    }
}

/// Draw the component count and mixture weights.
pub fn sample_mixture_spec<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.n == 0 {
        return Ok(vec![1.0]);
    }
    let p = Beta::new(cfg.alpha, cfg.beta)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(rng);
    let extra = Binomial::new(cfg.n as u64, p)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .sample(rng) as usize;
    let count = extra + 1;
    if count == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(cfg.omega, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..count).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && draws.iter().all(|&g| g > 0.0) {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Choose `count` distinct indices uniformly from `0..population`.
pub fn sample_components<R: Rng + ?Sized>(population: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let count = count.min(population);
    index::sample(rng, population, count).into_vec()
}

/// `(Σ wᵢ xᵢ) / sqrt(Σ wᵢ²)`.
pub fn mix_signals(components: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} components vs {} weights",
            components.len(),
            weights.len()
        )));
    }
    let len = components[0].len();
    if components.iter().any(|c| c.len() != len) {
        return Err(Error::Shape("mixup components differ in length".into()));
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Numeric("mixup weights have zero norm".into()));
    }
    Ok((0..len)
        .map(|i| {
            let s: f64 = components
                .iter()
                .zip(weights)
                .map(|(c, &w)| w * c[i] as f64)
                .sum();
            (s / norm) as f32
        })
        .collect())
}

/// Multi-hot union of the label sets.
pub fn merge_targets(label_sets: &[&[String]], vocab: &LabelVocabulary) -> Result<Vec<f64>> {
    let mut target = vec![0.0; vocab.len()];
    for set in label_sets {
        for label in set.iter() {
            target[vocab.require_id(label)?] = 1.0;
        }
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn n_zero_disables_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_mixture_spec(&MixupConfig::DISABLED, &mut rng).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let cfg = MixupConfig { n: 4, alpha: 2.0, beta: 1.0, omega: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let w = sample_mixture_spec(&cfg, &mut rng).unwrap();
            assert!(!w.is_empty() && w.len() <= 5);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MixupConfig { n: 2, alpha: 0.0, beta: 1.0, omega: 1.0 };
        assert!(sample_mixture_spec(&cfg, &mut rng).is_err());
    }

    #[test]
    fn mix_identity_and_doubling() {
        let x: Vec<f32> = (0..64).map(|i| (i as f32 * 0.1).sin()).collect();
        assert_eq!(mix_signals(&[&x], &[1.0]).unwrap(), x);
        let y = mix_signals(&[&x, &x], &[0.5, 0.5]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((*b as f64 - *a as f64 * std::f64::consts::SQRT_2).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_weights_select_component() {
        let x: Vec<f32> = vec![0.25, -0.5, 0.75];
        let z: Vec<f32> = vec![0.1, 0.2, 0.3];
        assert_eq!(mix_signals(&[&x, &z], &[0.0, 1.0]).unwrap(), z);
    }

    #[test]
    fn length_mismatch_is_error() {
        let a = vec![0.0f32; 4];
        let b = vec![0.0f32; 5];
        assert!(mix_signals(&[&a, &b], &[0.5, 0.5]).is_err());
        assert!(mix_signals(&[&a], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn targets_are_a_union() {
        let v = vocab();
        assert_eq!(merge_targets(&[&labels(&["a"])], &v).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(
            merge_targets(&[&labels(&["a"]), &labels(&["a", "b"])], &v).unwrap(),
            vec![1.0, 1.0, 0.0]
        );
        assert_eq!(
            merge_targets(&[&labels(&["a"]), &labels(&["b"]), &labels(&["c"])], &v).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert!(merge_targets(&[&labels(&["zzz"])], &v).is_err());
    }

    #[test]
    fn components_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut c = sample_components(10, 3, &mut rng);
            c.sort();
            c.dedup();
            assert_eq!(c.len(), 3);
        }
        assert_eq!(sample_components(2, 5, &mut rng).len(), 2);
    }
}

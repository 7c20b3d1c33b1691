//! Gumbel-Softmax relaxation of categorical sampling.

use rand::Rng;

use crate::error::{Error, Result};

/// A standard Gumbel(0, 1) draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let u = u.max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax((logits + noise) / temperature)` with caller-supplied noise.
pub fn perturbed_softmax(logits: &[f64], noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(z, g)| (z + g) / temperature)
        .collect();
    Ok(softmax(&scaled))
}

/// One relaxed categorical sample.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let noise: Vec<f64> = logits.iter().map(|_| sample_gumbel(rng)).collect();
    perturbed_softmax(logits, &noise, temperature)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn low_temperature_approaches_argmax() {
        let p = perturbed_softmax(&[10.0, 0.0, 0.0], &[0.0; 3], 0.01).unwrap();
        assert!(p[0] > 0.999);
    }

    #[test]
    fn zero_noise_matches_softmax() {
        let p = perturbed_softmax(&[1.0, 2.0], &[0.0, 0.0], 1.0).unwrap();
        // e^1 / (e^1 + e^2) = 1 / (1 + e)
        let expected = 1.0 / (1.0 + std::f64::consts::E);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.2689).abs() < 1e-4);
        assert!((p[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let p = gumbel_softmax(&[0.0, 0.0, 0.0], 0.5, &mut rng).unwrap();
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            counts[arg] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = gumbel_softmax(&[f64::NAN, 0.0], 1.0, &mut rng).unwrap_err();
        assert_eq!(err.code(), "NonFiniteLogits");
    }

    #[test]
    fn logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn samples_are_distributions(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..8),
            tau in 0.2f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = gumbel_softmax(&logits, tau, &mut rng).unwrap();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

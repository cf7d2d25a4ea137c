//! Gaussian-mechanism helpers for the private variants.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::norm;
use crate::seed;

/// Noise scale of the Gaussian mechanism,
/// `σ = sensitivity·√(2 ln(1.25/δ))/ε`.
pub fn dp_noise_calibration(eps: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::domain(format!("eps must be > 0, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::domain(format!("sensitivity must be > 0, got {sensitivity}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / eps)
}

/// Bookkeeping of the noise mechanisms a run applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLog {
    pub mechanism: String,
    pub sigma: f64,
    pub clip_norm: Option<f64>,
    pub refreshes: usize,
    /// Noisy releases (one per model, class and refresh for gradients; one
    /// per class for embeddings).
    pub invocations: usize,
}

/// Adds `N(0, σ²)` to every coordinate using the stream `seed`. `σ = 0`
/// leaves `v` untouched.
pub fn add_gaussian_noise(v: &mut [f64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = seed::rng(seed);
    for x in v {
        *x += normal.sample(&mut rng);
    }
}

/// Rescales `g` to norm at most `clip`.
pub fn clip_to_norm(g: &mut [f64], clip: f64) {
    let n = norm(g);
    if n > clip {
        let s = clip / n;
        for x in g {
            *x *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let s = dp_noise_calibration(1.0, 1e-5, 1.0).unwrap();
        let want = (2.0 * 125_000f64.ln()).sqrt();
        assert!((s - want).abs() < 1e-12);
        assert!((s - 4.8448).abs() < 1e-4);
        let half = dp_noise_calibration(2.0, 1e-5, 1.0).unwrap();
        assert!((half - s / 2.0).abs() < 1e-12);
        assert!(dp_noise_calibration(0.0, 1e-5, 1.0).is_err());
        assert!(dp_noise_calibration(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut v = vec![0.1, -0.2];
        add_gaussian_noise(&mut v, 0.0, 9);
        assert_eq!(v, vec![0.1, -0.2]);
        let mut g = vec![3.0, 4.0];
        clip_to_norm(&mut g, 1.0);
        assert!((norm(&g) - 1.0).abs() < 1e-15);
    }
}

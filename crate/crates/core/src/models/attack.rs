use serde::{Deserialize, Serialize};

use super::{Loss, Mlp};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// L∞ projected sign-gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub loss: Loss,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            eps: 0.05,
            steps: 10,
            step_size: 0.0125,
            loss: Loss::CrossEntropy,
        }
    }
}

fn project(x: &mut [f64], x0: &[f64], eps: f64) {
    for (v, &c) in x.iter_mut().zip(x0) {
        let lo = (c - eps).max(0.0);
        let hi = (c + eps).min(1.0);
        // x0 outside the unit box: keep the ball constraint only
        *v = if lo <= hi { v.clamp(lo, hi) } else { v.clamp(c - eps, c + eps) };
    }
}

/// Returns the iterate with the largest loss seen, starting from `x` itself,
/// so the attacked loss never drops below the clean loss.
pub fn pgd_attack(model: &Mlp, x: &[f64], y: usize, cfg: &PgdConfig) -> Result<Vec<f64>> {
    if cfg.eps < 0.0 || !cfg.eps.is_finite() {
        return Err(Error::domain(format!("eps must be non-negative, got {}", cfg.eps)));
    }
    let mut best = x.to_vec();
    let mut best_loss = model.sample_loss(x, y, cfg.loss)?;
    if cfg.eps == 0.0 {
        return Ok(best);
    }
    let mut cur = x.to_vec();
    let labels = [y];
    for _ in 0..cfg.steps {
        let xb = Matrix::from_vec(1, cur.len(), cur.clone())?;
        let g = model.backward(&xb, &labels, cfg.loss)?;
        for (v, &gi) in cur.iter_mut().zip(g.input_grads.row(0)) {
            *v += cfg.step_size * sign(gi);
        }
        project(&mut cur, x, cfg.eps);
        let l = model.sample_loss(&cur, y, cfg.loss)?;
        if l > best_loss {
            best_loss = l;
            best.copy_from_slice(&cur);
        }
    }
    Ok(best)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attacks every row independently.
pub fn pgd_attack_batch(model: &Mlp, x: &Matrix, labels: &[usize], cfg: &PgdConfig) -> Result<Matrix> {
    let mut out = x.clone();
    for (i, &y) in labels.iter().enumerate() {
        let a = pgd_attack(model, x.row(i), y, cfg)?;
        out.row_mut(i).copy_from_slice(&a);
    }
    Ok(out)
}

/// Mean loss at the attacked points.
pub fn adversarial_loss(model: &Mlp, x: &Matrix, labels: &[usize], cfg: &PgdConfig) -> Result<f64> {
    let adv = pgd_attack_batch(model, x, labels, cfg)?;
    model.loss(&adv, labels, cfg.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;

    #[test]
    fn zero_radius_returns_input() {
        let m = Mlp::new(&[3, 4, 2], Activation::Relu, 2).unwrap();
        let x = [0.2, 0.5, 0.8];
        let cfg = PgdConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert_eq!(pgd_attack(&m, &x, 1, &cfg).unwrap(), x.to_vec());
    }

    #[test]
    fn attacked_loss_dominates_and_stays_in_ball() {
        let m = Mlp::new(&[3, 8, 2], Activation::Tanh, 5).unwrap();
        let x = [0.02, 0.5, 0.97];
        let cfg = PgdConfig {
            eps: 0.1,
            steps: 20,
            step_size: 0.02,
            loss: Loss::CrossEntropy,
        };
        let a = pgd_attack(&m, &x, 0, &cfg).unwrap();
        let clean = m.sample_loss(&x, 0, cfg.loss).unwrap();
        assert!(m.sample_loss(&a, 0, cfg.loss).unwrap() >= clean);
        for (ai, xi) in a.iter().zip(&x) {
            assert!((ai - xi).abs() <= 0.1 + 1e-15);
            assert!((0.0..=1.0).contains(ai));
        }
    }
}

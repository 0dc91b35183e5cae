//! Momentum SGD with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

/// `lr0 · ½(1 + cos(π·t/T))`, with `t` in (fractional) epochs.
pub fn cosine_lr(lr0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * (t / total).min(1.0)).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        Sgd { momentum, weight_decay, velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect() }
    }

    /// `v ← μ·v + g + λ·w` (`λ` only when `decay`), then `w ← w − lr·v`.
    pub fn step(&mut self, slot: usize, w: &mut [f64], g: &[f64], lr: f64, decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(self.velocity[slot].iter_mut()) {
            *vi = self.momentum * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0.0, 10.0), 0.1);
        assert!(cosine_lr(0.1, 10.0, 10.0).abs() < 1e-17);
        assert!((cosine_lr(0.1, 5.0, 10.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn scalar_update() {
        let mut opt = Sgd::new(0.9, 0.0, [1]);
        let mut w = [1.0];
        opt.step(0, &mut w, &[0.0], 0.1, true);
        assert_eq!(w, [1.0]);

        let mut opt = Sgd::new(0.9, 0.01, [1]);
        let mut w = [1.0];
        opt.step(0, &mut w, &[0.5], 0.1, true);
        // v = 0.5 + 0.01, w = 1 - 0.051
        assert!((w[0] - 0.949).abs() < 1e-15);
        opt.step(0, &mut w, &[0.5], 0.1, true);
        // v = 0.9·0.51 + 0.5 + 0.00949
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((w[0] - (0.949 - 0.1 * v2)).abs() < 1e-15);
    }
}

//! Combining per-level objectives.

use serde::Serialize;

use crate::error::{Error, Result};

pub const FW_TOLERANCE: f64 = 1e-6;
pub const FW_MAX_ITERS: usize = 250;

/// Equal weights `1/(n+1)` and the weighted loss.
pub fn combine_us(losses: &[f64]) -> Result<(f64, Vec<f64>)> {
    if losses.is_empty() {
        return Err(Error::invalid("no losses to combine"));
    }
    if let Some(level) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Divergence { level, epoch: 0 });
    }
    let a = 1.0 / losses.len() as f64;
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, vec![a; losses.len()]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinNorm {
    pub alpha: Vec<f64>,
    pub norm_sq: f64,
    pub iterations: usize,
}

/// Minimum-norm point of the convex hull of `grads` by Frank–Wolfe with
/// exact line search, run on the Gram matrix.
pub fn solve_min_norm(grads: &[Vec<f64>]) -> Result<MinNorm> {
    let k = grads.len();
    let dim = grads.first().map_or(0, Vec::len);
    if k == 0 || dim == 0 {
        return Err(Error::invalid("min-norm solver needs at least one non-empty gradient"));
    }
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::invalid("gradients differ in dimension"));
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite gradient"));
    }
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let d: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
            gram[i * k + j] = d;
            gram[j * k + i] = d;
        }
    }
    Ok(min_norm_gram(&gram, k))
}

/// Frank–Wolfe with away steps on `min αᵀMα` over the simplex for a `k×k`
/// Gram matrix. Stops once the duality gap falls below `FW_TOLERANCE`.
pub fn min_norm_gram(gram: &[f64], k: usize) -> MinNorm {
    let mut alpha = vec![1.0 / k as f64; k];
    let mut iterations = 0;
    for _ in 0..FW_MAX_ITERS {
        let m_alpha: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[i * k + j] * alpha[j]).sum()).collect();
        let xx: f64 = alpha.iter().zip(&m_alpha).map(|(a, b)| a * b).sum();
        let t = (0..k).fold(0, |best, i| if m_alpha[i] < m_alpha[best] { i } else { best });
        let a = (0..k).filter(|&i| alpha[i] > 0.0).max_by(|&i, &j| m_alpha[i].total_cmp(&m_alpha[j])).unwrap_or(t);
        let fw_gap = xx - m_alpha[t];
        if fw_gap < FW_TOLERANCE {
            break;
        }
        iterations += 1;
        let away_gap = m_alpha[a] - xx;
        if fw_gap >= away_gap || alpha[a] >= 1.0 {
            let curv = xx - 2.0 * m_alpha[t] + gram[t * k + t];
            let gamma = if curv <= 0.0 { 1.0 } else { (fw_gap / curv).clamp(0.0, 1.0) };
            alpha.iter_mut().for_each(|v| *v *= 1.0 - gamma);
            alpha[t] += gamma;
        } else {
            let max = alpha[a] / (1.0 - alpha[a]);
            let curv = xx - 2.0 * m_alpha[a] + gram[a * k + a];
            let gamma = if curv <= 0.0 { max } else { (away_gap / curv).clamp(0.0, max) };
            alpha.iter_mut().for_each(|v| *v *= 1.0 + gamma);
            alpha[a] = if gamma == max { 0.0 } else { alpha[a] - gamma };
        }
    }
    let norm_sq = quad(gram, &alpha, k);
    MinNorm { alpha, norm_sq, iterations }
}

fn quad(gram: &[f64], a: &[f64], k: usize) -> f64 {
    (0..k).map(|i| (0..k).map(|j| a[i] * gram[i * k + j] * a[j]).sum::<f64>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn us_cases() {
        let (l, a) = combine_us(&[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(a, vec![1.0 / 3.0; 3]);
        assert_eq!(combine_us(&[0.7]).unwrap(), (0.7, vec![1.0]));
        assert!(matches!(combine_us(&[1.0, f64::NAN]), Err(Error::Divergence { level: 1, .. })));
        let (_, a) = combine_us(&[1e9, 1e-9, 5.0]).unwrap();
        assert_eq!(a, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn min_norm_cases() {
        let r = solve_min_norm(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((r.alpha[0] - 0.5).abs() < 1e-9 && (r.norm_sq - 0.5).abs() < 1e-9);
        let r = solve_min_norm(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        assert!((r.alpha[0] - 0.5).abs() < 1e-9 && r.norm_sq.abs() < 1e-12);
        assert!(solve_min_norm(&[]).is_err());
        assert!(solve_min_norm(&[vec![]]).is_err());
    }
}

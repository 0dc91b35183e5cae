//! Self-distillation from the next-higher precision.

use crate::kernels::softmax;
use crate::train::KdMode;

/// Loss and gradient w.r.t. the student logits for one sample. The teacher
/// logits are constants.
pub fn kd_sample(student: &[f64], teacher: &[f64], mode: KdMode) -> (f64, Vec<f64>) {
    let p = softmax(student);
    let q = softmax(teacher);
    match mode {
        KdMode::Off => (0.0, vec![0.0; student.len()]),
        KdMode::Cos => {
            let pp: f64 = p.iter().map(|v| v * v).sum::<f64>();
            let qq: f64 = q.iter().map(|v| v * v).sum::<f64>();
            let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            let (np, nq) = (pp.sqrt(), qq.sqrt());
            let c = pq / (np * nq);
            // ∂L/∂p = −(q/(|q||p|) − c·p/|p|²)
            let dp: Vec<f64> = p.iter().zip(&q).map(|(&pi, &qi)| -(qi / (nq * np) - c * pi / pp)).collect();
            (1.0 - c, softmax_backward(&p, &dp))
        }
        KdMode::Kl => {
            let log_p = log_softmax(student);
            let log_q = log_softmax(teacher);
            let loss = q
                .iter()
                .zip(log_q.iter().zip(&log_p))
                .map(|(&qi, (&lq, &lp))| if qi > 0.0 { qi * (lq - lp) } else { 0.0 })
                .sum();
            (loss, p.iter().zip(&q).map(|(a, b)| a - b).collect())
        }
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Pull `∂L/∂p` back through `p = softmax(s)`.
fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)).collect()
}

/// Batch-mean loss for logits laid out `[N, K]`.
pub fn self_kd_loss(student: &[f64], teacher: &[f64], classes: usize, mode: KdMode) -> f64 {
    let n = student.len() / classes;
    (0..n)
        .map(|i| kd_sample(&student[i * classes..(i + 1) * classes], &teacher[i * classes..(i + 1) * classes], mode).0)
        .sum::<f64>()
        / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_extremes() {
        let (l, _) = kd_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], KdMode::Cos);
        assert!(l.abs() < 1e-15);
        // near one-hot distributions on different classes
        let (l, _) = kd_sample(&[200.0, 0.0], &[0.0, 200.0], KdMode::Cos);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_differences() {
        let s = [0.3, -1.2, 0.8, 0.1];
        let t = [1.0, 0.2, -0.5, 0.4];
        for mode in [KdMode::Cos, KdMode::Kl] {
            let (_, g) = kd_sample(&s, &t, mode);
            for j in 0..s.len() {
                let h = 1e-6;
                let mut a = s;
                let mut b = s;
                a[j] += h;
                b[j] -= h;
                let fd = (kd_sample(&a, &t, mode).0 - kd_sample(&b, &t, mode).0) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8, "{mode:?} {j}: {fd} vs {}", g[j]);
            }
        }
    }
}

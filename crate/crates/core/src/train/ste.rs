//! Straight-through surrogate gradients for weight and activation quantizers.

/// `∂L/∂w` from `∂L/∂w̄_i`: `upstream / s_i` while `w/s_n` lies inside the top
/// quantizer's range `[−qn, qp]`, zero outside.
#[inline]
pub fn ste_weight_grad(upstream: f64, s_i: f64, w: f64, s_n: f64, qn: i32, qp: i32) -> f64 {
    let v = w / s_n;
    if v >= -(qn as f64) && v <= qp as f64 {
        upstream / s_i
    } else {
        0.0
    }
}

/// Learned-step-size branch value `∂ŵ/∂s_i` for `ŵ = w̄_i·s_i`, chosen on the
/// pre-clip ratio `w/s_i` against the level-`i` range, times `upstream`
/// (`∂L/∂ŵ`).
#[inline]
pub fn step_size_grad(upstream: f64, w: f64, s_i: f64, w_bar: i32, qn: i32, qp: i32) -> f64 {
    let v = w / s_i;
    let branch = if v < -(qn as f64) {
        -(qn as f64)
    } else if v > qp as f64 {
        qp as f64
    } else {
        w_bar as f64 - v
    };
    upstream * branch
}

/// Chain a level-`i` step gradient to the source step: `s_i = s_w·2^(n−i)`.
#[inline]
pub fn chain_to_source(g: f64, level: usize, n: usize) -> f64 {
    g * (1u64 << (n - level)) as f64
}

/// `1/sqrt(count·qp)`.
#[inline]
pub fn grad_scale(count: usize, qp: i32) -> f64 {
    1.0 / ((count.max(1) as f64) * qp.max(1) as f64).sqrt()
}

/// Activation pass-through mask: `0 ≤ a/s_a ≤ qp`.
#[inline]
pub fn act_mask(a: f64, s_a: f64, qp: i32) -> bool {
    let v = a / s_a;
    (0.0..=qp as f64).contains(&v)
}

/// Unsigned activation step branch: `ā − a/s_a` inside, `0` below, `qp` above.
#[inline]
pub fn act_step_branch(a: f64, s_a: f64, a_bar: i32, qp: i32) -> f64 {
    let v = a / s_a;
    if v < 0.0 {
        0.0
    } else if v > qp as f64 {
        qp as f64
    } else {
        a_bar as f64 - v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_cases() {
        assert_eq!(ste_weight_grad(0.5, 0.25, 0.1, 0.25, 8, 7), 2.0);
        assert_eq!(ste_weight_grad(0.5, 0.25, 100.0, 0.25, 8, 7), 0.0);
        assert_eq!(ste_weight_grad(0.5, 0.25, -100.0, 0.25, 8, 7), 0.0);
    }

    #[test]
    fn step_branches() {
        assert!((step_size_grad(1.0, 0.6, 1.0, 1, 2, 1) - 0.4).abs() < 1e-15);
        assert_eq!(step_size_grad(1.0, -50.0, 1.0, -2, 2, 1), -2.0);
        assert_eq!(step_size_grad(1.0, 50.0, 1.0, 1, 2, 1), 1.0);
        assert_eq!(chain_to_source(1.0, 0, 2), 4.0);
        assert_eq!(chain_to_source(1.0, 2, 2), 1.0);
    }

    #[test]
    fn activation_branches() {
        assert!(act_mask(2.9, 1.0, 3));
        assert!(!act_mask(3.1, 1.0, 3));
        assert!(!act_mask(-0.1, 1.0, 3));
        assert_eq!(act_step_branch(-1.0, 1.0, 0, 3), 0.0);
        assert_eq!(act_step_branch(9.0, 1.0, 3, 3), 3.0);
        assert!((act_step_branch(1.2, 1.0, 1, 3) - (-0.2)).abs() < 1e-15);
    }
}

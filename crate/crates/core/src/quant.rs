//! Uniform quantization primitives.

use crate::error::{Error, Result};

/// Clip bounds `(Q_N, Q_P)` so that quantized values lie in `[-Q_N, Q_P]`.
pub fn quant_range(bits: u32, signed: bool) -> Result<(i32, i32)> {
    if bits == 0 || bits > 30 {
        return Err(Error::invalid(format!("bit width {bits} outside 1..=30")));
    }
    Ok(if signed { (1 << (bits - 1), (1 << (bits - 1)) - 1) } else { (0, (1 << bits) - 1) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub step: f64,
    pub bits: u32,
    pub signed: bool,
}

impl QuantParams {
    pub fn new(step: f64, bits: u32, signed: bool) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {step}")));
        }
        quant_range(bits, signed)?;
        Ok(QuantParams { step, bits, signed })
    }

    pub fn range(&self) -> (i32, i32) {
        // validated in `new`
        quant_range(self.bits, self.signed).expect("validated bit width")
    }
}

/// Round to nearest, ties to even, then clip to `[-qn, qp]`.
#[inline]
pub fn quantize_scalar(v: f64, step: f64, qn: i32, qp: i32) -> i32 {
    let r = (v / step).round_ties_even();
    r.clamp(-(qn as f64), qp as f64) as i32
}

/// Integer tensor with the quantizer that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub data: Vec<i32>,
    pub shape: Vec<usize>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn new(data: Vec<i32>, shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::validation(format!("shape {shape:?} holds {numel} elements, data has {}", data.len())));
        }
        let (qn, qp) = params.range();
        if let Some(i) = data.iter().position(|&e| e < -qn || e > qp) {
            return Err(Error::validation(format!("element {} at index {i} outside [{}, {qp}]", data[i], -qn)));
        }
        Ok(QTensor { data, shape, params })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.params.step
    }

    pub fn bits(&self) -> u32 {
        self.params.bits
    }
}

pub fn quantize(v: &[f64], shape: &[usize], params: QuantParams) -> Result<QTensor> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (qn, qp) = params.range();
    let data = v.iter().map(|&x| quantize_scalar(x, params.step, qn, qp)).collect();
    QTensor::new(data, shape.to_vec(), params)
}

pub fn dequantize(q: &QTensor) -> Vec<f64> {
    q.data.iter().map(|&e| e as f64 * q.params.step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranges() {
        assert_eq!(quant_range(3, true).unwrap(), (4, 3));
        assert_eq!(quant_range(2, false).unwrap(), (0, 3));
        assert_eq!(quant_range(1, false).unwrap(), (0, 1));
        assert!(quant_range(0, true).is_err());
    }

    #[test]
    fn scalar_cases() {
        let p = QuantParams::new(1.0, 3, true).unwrap();
        assert_eq!(quantize(&[2.6], &[1], p).unwrap().data, vec![3]);
        assert_eq!(quantize(&[0.0], &[1], p).unwrap().data, vec![0]);
        let p2 = QuantParams::new(1.0, 2, true).unwrap();
        assert_eq!(quantize(&[100.0], &[1], p2).unwrap().data, vec![1]);
        assert_eq!(quantize(&[-100.0], &[1], p2).unwrap().data, vec![-2]);

        let q = QTensor::new(vec![3], vec![1], QuantParams::new(0.5, 3, true).unwrap()).unwrap();
        assert_eq!(dequantize(&q), vec![1.5]);
        let q0 = QTensor::new(vec![0], vec![1], QuantParams::new(0.5, 3, true).unwrap()).unwrap();
        assert_eq!(dequantize(&q0), vec![0.0]);

        // round(2.4) = 2 -> 1.0
        let p3 = QuantParams::new(0.5, 3, true).unwrap();
        assert_eq!(dequantize(&quantize(&[1.2], &[1], p3).unwrap()), vec![1.0]);
    }

    #[test]
    fn ties_go_to_even() {
        let p = QuantParams::new(1.0, 8, true).unwrap();
        let q = quantize(&[0.5, 1.5, 2.5, -0.5, -1.5], &[5], p).unwrap();
        assert_eq!(q.data, vec![0, 2, 2, 0, -2]);
    }

    #[test]
    fn errors() {
        assert!(QuantParams::new(0.0, 2, true).is_err());
        assert!(QuantParams::new(-1.0, 2, true).is_err());
        let p = QuantParams::new(1.0, 4, true).unwrap();
        match quantize(&[0.0, f64::NAN, 1.0], &[3], p) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(QTensor::new(vec![8], vec![1], p).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(bits in 1u32..9, signed: bool, step in 1e-3f64..10.0, seed in any::<u64>()) {
            let p = QuantParams::new(step, bits, signed).unwrap();
            let (qn, qp) = p.range();
            let span = (qp + qn + 1) as u64;
            let data: Vec<i32> = (0..16u64)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407)) >> 33) % span) as i32 - qn)
                .collect();
            let q = QTensor::new(data, vec![16], p).unwrap();
            let back = quantize(&dequantize(&q), &[16], p).unwrap();
            prop_assert_eq!(back, q);
        }

        #[test]
        fn error_bound_and_saturation(v in -50.0f64..50.0, step in 0.01f64..4.0, bits in 2u32..8) {
            let p = QuantParams::new(step, bits, true).unwrap();
            let (qn, qp) = p.range();
            let q = quantize(&[v], &[1], p).unwrap();
            let x = v / step;
            if x >= -(qn as f64) && x <= qp as f64 {
                prop_assert!((dequantize(&q)[0] - v).abs() <= step / 2.0 + 1e-12);
            } else if x > qp as f64 {
                prop_assert_eq!(q.data[0], qp);
            } else {
                prop_assert_eq!(q.data[0], -qn);
            }
        }
    }
}

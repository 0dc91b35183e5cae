//! Bit-plane decomposition of quantized weights.
//!
//! A `K`-bit signed tensor is split into a `K0`-bit basic tensor (the most
//! significant bits) and `K - K0` one-bit enhance planes. Lower precisions are
//! obtained by floor-halving, which drops the least significant plane:
//! `w_i = 2 * w_{i-1} + b_i` and `s_i = s_{i-1} / 2`.

use crate::error::{Error, Result};
use crate::quant::{QTensor, QuantParams};

/// One enhance plane; every element is 0 or 1. `level` counts from 1
/// (the plane nearest the basic layer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    pub data: Vec<u8>,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerticalStack {
    pub basic: QTensor,
    pub enhance: Vec<BitPlane>,
    pub top_step: f64,
}

/// Floor-halve every element, dropping the least significant bit.
pub fn downsample(w: &QTensor) -> Result<QTensor> {
    if w.bits() < 2 || !w.params.signed {
        return Err(Error::CannotDownsample { bits: w.bits() });
    }
    let params = QuantParams::new(w.step() * 2.0, w.bits() - 1, true)?;
    // arithmetic shift is floor division for negative values
    let data = w.data.iter().map(|&e| e >> 1).collect();
    Ok(QTensor { data, shape: w.shape.clone(), params })
}

/// The bit dropped when going from `hi` to `lo = downsample(hi)`.
pub fn extract_enhance(hi: &QTensor, lo: &QTensor, level: usize) -> Result<BitPlane> {
    if hi.len() != lo.len() {
        return Err(Error::Consistency(format!("length {} vs {}", hi.len(), lo.len())));
    }
    let mut data = Vec::with_capacity(hi.len());
    for (i, (&h, &l)) in hi.data.iter().zip(&lo.data).enumerate() {
        let b = h - 2 * l;
        if b != 0 && b != 1 {
            return Err(Error::Consistency(format!("element {i}: {h} - 2*{l} = {b} is not a bit")));
        }
        data.push(b as u8);
    }
    Ok(BitPlane { data, level })
}

/// Split a top-precision tensor into basic + enhance planes by repeated
/// downsampling.
pub fn decompose(top: &QTensor, basic_bits: u32) -> Result<VerticalStack> {
    if basic_bits < 2 || top.bits() < basic_bits {
        return Err(Error::invalid(format!(
            "cannot decompose {}-bit tensor to a {basic_bits}-bit basic layer",
            top.bits()
        )));
    }
    let n = (top.bits() - basic_bits) as usize;
    let mut planes = Vec::with_capacity(n);
    let mut cur = top.clone();
    for level in (1..=n).rev() {
        let lo = downsample(&cur)?;
        planes.push(extract_enhance(&cur, &lo, level)?);
        cur = lo;
    }
    planes.reverse();
    Ok(VerticalStack { basic: cur, enhance: planes, top_step: top.step() })
}

impl VerticalStack {
    pub fn n(&self) -> usize {
        self.enhance.len()
    }

    pub fn basic_bits(&self) -> u32 {
        self.basic.bits()
    }

    pub fn len(&self) -> usize {
        self.basic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basic.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.basic.shape
    }

    /// `s_k = top_step * 2^(n-k)`.
    pub fn step_at(&self, k: usize) -> f64 {
        self.top_step * (1u64 << (self.n() - k.min(self.n()))) as f64
    }

    /// Rebuild the level-`k` tensor: `2^k * w0 + sum_j 2^(k-j) * b_j`.
    pub fn assemble(&self, k: usize) -> Result<QTensor> {
        if k > self.n() {
            return Err(Error::invalid(format!("level {k} exceeds stack depth {}", self.n())));
        }
        let mut data = self.basic.data.clone();
        for plane in &self.enhance[..k] {
            for (d, &b) in data.iter_mut().zip(&plane.data) {
                *d = 2 * *d + b as i32;
            }
        }
        let params = QuantParams::new(self.step_at(k), self.basic_bits() + k as u32, true)?;
        Ok(QTensor { data, shape: self.basic.shape.clone(), params })
    }
}

/// `z_i = (1 - 2^(i-n)) / 2`: the mean of the low bits discarded when
/// reaching level `i`, in level-`i` units.
pub fn compensation(i: usize, n: usize) -> Result<f64> {
    if i > n {
        return Err(Error::invalid(format!("level {i} above top level {n}")));
    }
    Ok(0.5 * (1.0 - (2.0f64).powi(i as i32 - n as i32)))
}

/// `(w + z_i) * s_i` element-wise.
pub fn compensated_dequantize(w: &QTensor, i: usize, n: usize) -> Result<Vec<f64>> {
    let z = compensation(i, n)?;
    Ok(w.data.iter().map(|&e| (e as f64 + z) * w.step()).collect())
}

/// Packed byte form of a stack: the basic layer offset-encoded into
/// `basic_bits`-wide fields, each plane one bit per element, both MSB-first
/// with zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPlanes {
    pub basic: Vec<u8>,
    pub enhance: Vec<Vec<u8>>,
}

pub fn packed_len(elements: usize, bits: u32) -> usize {
    (elements * bits as usize).div_ceil(8)
}

fn pack_fields(values: impl Iterator<Item = u32>, bits: u32, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(len, bits)];
    let mut pos = 0usize;
    for v in values {
        for b in (0..bits).rev() {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_fields(bytes: &[u8], bits: u32, len: usize) -> Result<Vec<u32>> {
    if bytes.len() != packed_len(len, bits) {
        return Err(Error::corrupt(format!("{} bytes cannot hold exactly {len} {bits}-bit fields", bytes.len())));
    }
    let mut out = Vec::with_capacity(len);
    let mut pos = 0usize;
    for _ in 0..len {
        let mut v = 0u32;
        for _ in 0..bits {
            v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1) as u32;
            pos += 1;
        }
        out.push(v);
    }
    let total = bytes.len() * 8;
    while pos < total {
        if (bytes[pos / 8] >> (7 - pos % 8)) & 1 != 0 {
            return Err(Error::corrupt("non-zero padding bits"));
        }
        pos += 1;
    }
    Ok(out)
}

pub fn pack_planes(stack: &VerticalStack) -> PackedPlanes {
    let bits = stack.basic_bits();
    let (qn, _) = stack.basic.params.range();
    let basic = pack_fields(stack.basic.data.iter().map(|&v| (v + qn) as u32), bits, stack.len());
    let enhance =
        stack.enhance.iter().map(|p| pack_fields(p.data.iter().map(|&b| b as u32), 1, p.data.len())).collect();
    PackedPlanes { basic, enhance }
}

pub fn unpack_basic(bytes: &[u8], shape: &[usize], basic_bits: u32, step: f64) -> Result<QTensor> {
    let len = shape.iter().product();
    let params = QuantParams::new(step, basic_bits, true)?;
    let (qn, _) = params.range();
    let data = unpack_fields(bytes, basic_bits, len)?.into_iter().map(|v| v as i32 - qn).collect();
    QTensor::new(data, shape.to_vec(), params)
}

pub fn unpack_plane(bytes: &[u8], len: usize, level: usize) -> Result<BitPlane> {
    let data = unpack_fields(bytes, 1, len)?.into_iter().map(|v| v as u8).collect();
    Ok(BitPlane { data, level })
}

pub fn unpack_planes(packed: &PackedPlanes, shape: &[usize], basic_bits: u32, top_step: f64) -> Result<VerticalStack> {
    let n = packed.enhance.len();
    let s0 = top_step * (1u64 << n) as f64;
    let basic = unpack_basic(&packed.basic, shape, basic_bits, s0)?;
    let enhance = packed
        .enhance
        .iter()
        .enumerate()
        .map(|(i, b)| unpack_plane(b, basic.len(), i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerticalStack { basic, enhance, top_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(vals: &[i32], bits: u32, step: f64) -> QTensor {
        QTensor::new(vals.to_vec(), vec![vals.len()], QuantParams::new(step, bits, true).unwrap()).unwrap()
    }

    #[test]
    fn downsample_cases() {
        let d = downsample(&q(&[7, -4, -3], 4, 1.0)).unwrap();
        assert_eq!(d.data, vec![3, -2, -2]);
        assert_eq!(d.bits(), 3);
        assert_eq!(d.step(), 2.0);
        assert!(matches!(downsample(&q(&[0], 1, 1.0)), Err(Error::CannotDownsample { bits: 1 })));
    }

    #[test]
    fn extract_cases() {
        let hi = q(&[7, -4, -3], 4, 1.0);
        let lo = q(&[3, -2, -2], 3, 2.0);
        assert_eq!(extract_enhance(&hi, &lo, 1).unwrap().data, vec![1, 0, 1]);
        let bad = q(&[1, -2, -2], 3, 2.0);
        assert!(matches!(extract_enhance(&hi, &bad, 1), Err(Error::Consistency(_))));
    }

    #[test]
    fn decompose_cases() {
        let s = decompose(&q(&[5, 0], 4, 1.0), 2).unwrap();
        assert_eq!(s.basic.data, vec![1, 0]);
        assert_eq!(s.enhance[0].data, vec![0, 0]);
        assert_eq!(s.enhance[1].data, vec![1, 0]);
        assert_eq!(s.assemble(2).unwrap().data, vec![5, 0]);
        assert_eq!(s.assemble(0).unwrap(), s.basic);
        assert!(s.assemble(3).is_err());
    }

    #[test]
    fn exhaustive_four_bit() {
        let vals: Vec<i32> = (-8..8).collect();
        let top = q(&vals, 4, 0.25);
        let s = decompose(&top, 2).unwrap();
        assert_eq!(s.assemble(2).unwrap(), top);
        for k in 0..2 {
            assert_eq!(s.assemble(k).unwrap().step(), 2.0 * s.assemble(k + 1).unwrap().step());
        }
    }

    #[test]
    fn compensation_values() {
        assert_eq!(compensation(2, 2).unwrap(), 0.0);
        assert_eq!(compensation(0, 2).unwrap(), 0.375);
        assert_eq!(compensation(1, 2).unwrap(), 0.25);
        assert!(compensation(3, 2).is_err());
        assert_eq!(compensated_dequantize(&q(&[3], 4, 1.0), 2, 2).unwrap(), vec![3.0]);
        assert_eq!(compensated_dequantize(&q(&[1], 2, 2.0), 0, 2).unwrap(), vec![2.75]);
    }

    #[test]
    fn compensation_is_unbiased_over_all_values() {
        let vals: Vec<i32> = (-8..8).collect();
        let top = q(&vals, 4, 1.0);
        let s = decompose(&top, 2).unwrap();
        let top_mean: f64 = crate::quant::dequantize(&top).iter().sum::<f64>() / 16.0;
        for i in 0..=2 {
            let wi = s.assemble(i).unwrap();
            let m: f64 = compensated_dequantize(&wi, i, 2).unwrap().iter().sum::<f64>() / 16.0;
            assert_eq!(m, top_mean);
            let raw: f64 = crate::quant::dequantize(&wi).iter().sum::<f64>() / 16.0;
            assert_eq!(top_mean - raw, compensation(i, 2).unwrap() * wi.step());
        }
    }

    #[test]
    fn packing_layout() {
        let s = decompose(&q(&[-2, -1, 0, 1], 2, 1.0), 2).unwrap();
        assert_eq!(pack_planes(&s).basic, vec![0x1B]);
        assert_eq!(pack_fields([0u32; 8].into_iter(), 1, 8), vec![0x00]);
        // 9 elements, 2 bits -> 3 bytes, 1 bit -> 2 bytes
        assert_eq!(packed_len(9, 2), 3);
        assert_eq!(packed_len(9, 1), 2);
        assert!(unpack_basic(&[0x1B, 0], &[4], 2, 1.0).is_err());
        assert!(unpack_plane(&[0x01], 7, 1).is_err());
    }

    proptest! {
        #[test]
        fn pack_roundtrip(vals in proptest::collection::vec(-32i32..32, 1..70), basic in 2u32..4) {
            let top = q(&vals, 6, 0.125);
            let s = decompose(&top, basic).unwrap();
            let packed = pack_planes(&s);
            let back = unpack_planes(&packed, &[vals.len()], basic, 0.125).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn assemble_matches_downsample_chain(vals in proptest::collection::vec(-128i32..128, 1..40)) {
            let top = q(&vals, 8, 1.0);
            let s = decompose(&top, 2).unwrap();
            let mut cur = top.clone();
            for k in (0..=6).rev() {
                prop_assert_eq!(&s.assemble(k).unwrap(), &cur);
                if k > 0 {
                    cur = downsample(&cur).unwrap();
                }
            }
        }
    }
}

//! Group-wise asymmetric low-bit quantization used by the quantized cache
//! policies. Each group stores its minimum as the zero point and spreads the
//! value range across `2^bits - 1` uniform steps, so the absolute
//! reconstruction error never exceeds half a step.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Quantized form of a flat f64 slice: one `(scale, zero)` pair per group of
/// `group_size` consecutive values, codes stored one per input value. A final
/// short group is quantized on its own statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVec {
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub bits: u32,
    pub group_size: usize,
}

pub fn validate_bits(bits: u32) -> Result<()> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::Config(alloc::format!("quantization bits {bits} not in {{2, 4, 8}}")));
    }
    Ok(())
}

/// Quantizes `values` group by group. `scale = (max - min) / (2^bits - 1)`,
/// with a scale of 1 for constant groups so the round trip stays exact.
pub fn quantize_lowbit(values: &[f64], bits: u32, group_size: usize) -> Result<QuantizedVec> {
    validate_bits(bits)?;
    if group_size == 0 {
        return Err(Error::Config(String::from("quantization group size must be positive")));
    }
    let levels = (1u32 << bits) - 1;
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(values.len().div_ceil(group_size));
    let mut zeros = Vec::with_capacity(scales.capacity());

    for chunk in values.chunks(group_size) {
        let min = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let scale = if range == 0.0 { 1.0 } else { range / levels as f64 };
        for &x in chunk {
            let code = libm::round((x - min) / scale);
            codes.push(code.clamp(0.0, levels as f64) as u8);
        }
        scales.push(scale);
        zeros.push(min);
    }
    Ok(QuantizedVec { codes, scales, zeros, bits, group_size })
}

impl QuantizedVec {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    #[inline]
    pub fn dequantize_at(&self, i: usize) -> f64 {
        let g = i / self.group_size;
        self.zeros[g] + self.codes[i] as f64 * self.scales[g]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.codes.len()).map(|i| self.dequantize_at(i)).collect()
    }

    /// Worst-case absolute reconstruction error: half a step per group.
    pub fn max_error_bound(&self) -> f64 {
        self.scales.iter().cloned().fold(0.0, f64::max) / 2.0
    }
}

/// Bytes needed to hold `len` codes of `bits` bits each, rounded up.
pub fn packed_code_bytes(len: usize, bits: u32) -> u64 {
    ((len as u64) * bits as u64).div_ceil(8)
}

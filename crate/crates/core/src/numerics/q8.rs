use crate::error::{Error, Result};

use super::Tensor;

pub const DEFAULT_BLOCK: usize = 64;

/// Blockwise absmax-scaled signed 8-bit codes.
///
/// Each block of `block_size` consecutive elements stores one `f32` absmax
/// scale; element codes are `round(127 * x / absmax)` in `[-127, 127]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock8 {
    pub block_size: usize,
    pub shape: Vec<usize>,
    pub scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl QuantBlock8 {
    pub fn zeros(shape: &[usize], block_size: usize) -> Self {
        let n: usize = shape.iter().product();
        Self {
            block_size,
            shape: shape.to_vec(),
            scales: vec![0.0; n.div_ceil(block_size)],
            codes: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Worst-case absolute decode error for elements of block `b`.
    pub fn block_bound(&self, b: usize) -> f64 {
        self.scales[b] as f64 / 127.0
    }
}

pub fn q8_encode_slice(x: &[f64], shape: &[usize], block_size: usize) -> Result<QuantBlock8> {
    if block_size == 0 {
        return Err(Error::invalid("q8 block size must be at least 1"));
    }
    let mut scales = Vec::with_capacity(x.len().div_ceil(block_size));
    let mut codes = Vec::with_capacity(x.len());
    for block in x.chunks(block_size) {
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = absmax as f32;
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        let s = scale as f64;
        codes.extend(
            block
                .iter()
                .map(|&v| (v * 127.0 / s).round().clamp(-127.0, 127.0) as i8),
        );
    }
    Ok(QuantBlock8 {
        block_size,
        shape: shape.to_vec(),
        scales,
        codes,
    })
}

pub fn q8_encode(x: &Tensor, block_size: usize) -> Result<QuantBlock8> {
    q8_encode_slice(x.data(), x.shape(), block_size)
}

pub fn q8_decode_into(q: &QuantBlock8, out: &mut [f64]) {
    for (b, (codes, dst)) in q
        .codes
        .chunks(q.block_size)
        .zip(out.chunks_mut(q.block_size))
        .enumerate()
    {
        let s = q.scales[b] as f64;
        for (c, d) in codes.iter().zip(dst) {
            *d = *c as f64 * s / 127.0;
        }
    }
}

pub fn q8_decode(q: &QuantBlock8) -> Tensor {
    let mut out = vec![0.0; q.codes.len()];
    q8_decode_into(q, &mut out);
    Tensor::new(q.shape.clone(), out).expect("code count matches shape")
}

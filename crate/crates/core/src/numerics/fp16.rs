use half::f16;

use super::Tensor;

/// Largest finite binary16 magnitude.
pub const FP16_MAX: f64 = 65504.0;

/// Outcome of a half-precision round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp16Roundtrip {
    pub tensor: Tensor,
    /// Elements whose magnitude exceeded [`FP16_MAX`] and were clamped.
    pub saturated: usize,
}

/// Encodes one value, saturating out-of-range magnitudes to ±65504.
pub fn encode(v: f64) -> (u16, bool) {
    if v.is_finite() && v.abs() > FP16_MAX {
        let clamped = FP16_MAX.copysign(v);
        return (f16::from_f64(clamped).to_bits(), true);
    }
    let h = f16::from_f64(v);
    if h.is_infinite() && v.is_finite() {
        // values between 65504 and the rounding boundary
        return (f16::from_f64(FP16_MAX.copysign(v)).to_bits(), true);
    }
    (h.to_bits(), false)
}

pub fn decode(bits: u16) -> f64 {
    f16::from_bits(bits).to_f64()
}

/// Encode to IEEE-754 binary16 and decode back (round-to-nearest-even).
pub fn fp16_roundtrip(x: &Tensor) -> Fp16Roundtrip {
    let mut saturated = 0;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let (bits, sat) = encode(v);
            saturated += sat as usize;
            decode(bits)
        })
        .collect();
    if saturated > 0 {
        log::warn!("fp16 round trip saturated {saturated} value(s)");
    }
    Fp16Roundtrip {
        tensor: Tensor::new(x.shape().to_vec(), data).expect("shape preserved"),
        saturated,
    }
}

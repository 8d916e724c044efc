//! Image-quality, feature-distribution and overlap metrics.

pub mod encoder;
pub mod fid;
pub mod report;
pub mod ssim;

pub use encoder::{train_feature_encoder, EncoderConfig, FeatureEncoder, FEATURE_DIM};
pub use fid::{frechet_distance, GaussianFit};
pub use report::MetricReport;
pub use ssim::{ms_ssim, pair_msssim, ssim, Pairing, PairStats, SsimParams};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default FID sample count.
pub const FID_N: usize = 250;

/// Fréchet distance between encoder features of the first `n` images of each set.
pub fn fid(real: &[Tensor], synth: &[Tensor], enc: &FeatureEncoder, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("FID needs n ≥ 2"));
    }
    if n > real.len() || n > synth.len() {
        return Err(Error::invalid(format!(
            "FID n = {n} exceeds set sizes ({}, {})",
            real.len(),
            synth.len()
        )));
    }
    let fr = GaussianFit::fit(&enc.features_batch(&real[..n])?)?;
    let fs = GaussianFit::fit(&enc.features_batch(&synth[..n])?)?;
    frechet_distance(&fr, &fs)
}

/// `2|A∩B| / (|A| + |B|)` for pixels equal to `label`. Two empty masks score 1.
pub fn dice(pred: &[u8], gt: &[u8], label: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            got: vec![pred.len()],
        });
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (ip, ig) = (p == label, g == label);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        log::debug!("dice: label {label} absent from both masks; scored 1.0");
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

//! Gaussian-windowed SSIM and its multi-scale form.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Standard five-scale exponents, finest first.
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
    pub weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
            weights: MS_WEIGHTS.to_vec(),
        }
    }
}

impl SsimParams {
    fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term over all valid window positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub ssim: f64,
    pub cs: f64,
}

fn dims(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let &[h, w] = a.shape() else {
        return Err(Error::invalid("SSIM expects a 2-D image"));
    };
    if h < p.window || w < p.window {
        return Err(Error::invalid(format!("image {h}×{w} smaller than the {} px window", p.window)));
    }
    Ok((h, w))
}

/// Separable "valid" filtering: `[H, W] → [H − k + 1, W − k + 1]`.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..k).map(|i| g[i] * x[y * w + xx + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..k).map(|i| g[i] * rows[(y + i) * ow + xx]).sum();
        }
    }
    out
}

pub fn ssim_components(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<SsimComponents> {
    let (h, w) = dims(a, b, p)?;
    let g = gaussian_kernel(p.window, p.sigma);
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let (c1, c2) = (p.c1(), p.c2());
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    let n = mx.len() as f64;
    Ok(SsimComponents {
        ssim: s_sum / n,
        cs: cs_sum / n,
    })
}

pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    Ok(ssim_components(a, b, p)?.ssim)
}

/// Scales usable at `h × w`: each halves the size; the smallest stays ≥ the window.
pub fn num_scales(h: usize, w: usize, p: &SsimParams) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < p.weights.len() && h >= p.window && w >= p.window {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// 2×2 average pooling (odd trailing rows/columns dropped).
pub fn downsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let data = (0..oh * ow)
        .map(|i| {
            let (y, xx) = (2 * (i / ow), 2 * (i % ow));
            (d[y * w + xx] + d[y * w + xx + 1] + d[(y + 1) * w + xx] + d[(y + 1) * w + xx + 1]) / 4.0
        })
        .collect();
    Tensor::new(vec![oh, ow], data).unwrap()
}

/// Per-scale components, finest first.
pub fn ms_ssim_scales(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Vec<SsimComponents>> {
    let (h, w) = dims(a, b, p)?;
    let m = num_scales(h, w, p);
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut out = Vec::with_capacity(m);
    for s in 0..m {
        out.push(ssim_components(&x, &y, p)?);
        if s + 1 < m {
            x = downsample2(&x);
            y = downsample2(&y);
        }
    }
    Ok(out)
}

/// `Π_{j<M} cs_j^{w_j} · ssim_M^{w_M}` with the first `M` weights renormalized.
/// Negative terms are clamped to 0.
pub fn ms_ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    let scales = ms_ssim_scales(a, b, p)?;
    let m = scales.len();
    let total: f64 = p.weights[..m].iter().sum();
    let mut v = 1.0;
    for (j, s) in scales.iter().enumerate() {
        let term = if j + 1 == m { s.ssim } else { s.cs };
        v *= term.max(0.0).powf(p.weights[j] / total);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// `a` from the first set, `b` from the second.
    Cross,
    /// Two distinct members of the first set.
    Within,
    /// The same index in both sets.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

/// Mean MS-SSIM over `n_pairs` random pairs. Index draws are sequential;
/// scores are computed in parallel and reduced in draw order.
pub fn pair_msssim(
    set_a: &[Tensor],
    set_b: &[Tensor],
    n_pairs: usize,
    pairing: Pairing,
    rng: &mut Rng,
    p: &SsimParams,
) -> Result<PairStats> {
    if set_a.is_empty() || set_b.is_empty() || n_pairs == 0 {
        return Err(Error::invalid("pair_msssim needs non-empty sets and n_pairs ≥ 1"));
    }
    let pairs: Vec<(usize, usize)> = match pairing {
        Pairing::Cross => (0..n_pairs).map(|_| (rng.below(set_a.len()), rng.below(set_b.len()))).collect(),
        Pairing::Within => {
            if set_a.len() < 2 {
                return Err(Error::invalid("within-set pairs need at least two images"));
            }
            (0..n_pairs)
                .map(|_| {
                    let i = rng.below(set_a.len());
                    let j = (i + 1 + rng.below(set_a.len() - 1)) % set_a.len();
                    (i, j)
                })
                .collect()
        }
        Pairing::Identical => {
            let n = set_a.len().min(set_b.len());
            (0..n_pairs).map(|_| rng.below(n)).map(|i| (i, i)).collect()
        }
    };
    let second = if pairing == Pairing::Within { set_a } else { set_b };
    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| ms_ssim(&set_a[i], &second[j], p))
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(PairStats {
        mean,
        std: var.sqrt(),
        pairs: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn noise_image(seed: u64, n: usize) -> Tensor {
        gaussian(&mut Rng::new(seed, 0), &[n, n]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
    }

    #[test]
    fn identity_and_constants() {
        let p = SsimParams::default();
        let x = noise_image(1, 32);
        assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[16, 16], 0.5);
        assert!((ssim(&c, &c, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((ms_ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let p = SsimParams::default();
        let (a, b) = (noise_image(1, 24), noise_image(2, 24));
        assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
    }

    #[test]
    fn scale_count() {
        let p = SsimParams::default();
        assert_eq!(num_scales(64, 64, &p), 3);
        assert_eq!(num_scales(11, 11, &p), 1);
        assert_eq!(num_scales(512, 512, &p), 5);
        assert!(ms_ssim(&Tensor::zeros(&[10, 10]), &Tensor::zeros(&[10, 10]), &p).is_err());
        assert!(ssim(&Tensor::zeros(&[12, 12]), &Tensor::zeros(&[12, 13]), &p).is_err());
    }

    #[test]
    fn identical_pairing_scores_one() {
        let set: Vec<Tensor> = (0..4).map(|s| noise_image(s, 16)).collect();
        let st = pair_msssim(&set, &set, 10, Pairing::Identical, &mut Rng::new(0, 0), &SsimParams::default()).unwrap();
        assert!((st.mean - 1.0).abs() < 1e-12);
        let w = pair_msssim(&set, &set, 10, Pairing::Within, &mut Rng::new(0, 0), &SsimParams::default()).unwrap();
        assert!(w.mean < 0.9);
    }
}

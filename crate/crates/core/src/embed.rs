//! Exact t-SNE over encoder features, silhouette scoring and MS-SSIM
//! nearest-neighbour matching between synthetic and real images.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, SsimParams};
use crate::numerics::{Rng, Tensor};

pub const PERPLEXITY_TOL: f64 = 1e-5;
pub const PERPLEXITY_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iters: 100,
            dim: 2,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 10 {
            return Err(Error::invalid(format!("t-SNE needs at least 10 points, got {n}")));
        }
        if !(self.perplexity > 0.0 && self.perplexity < (n as f64 - 1.0) / 3.0) {
            return Err(Error::invalid(format!(
                "perplexity {} must lie in (0, (n−1)/3) for n = {n}",
                self.perplexity
            )));
        }
        if self.dim == 0 || self.iterations == 0 || !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) {
            return Err(Error::invalid("t-SNE dim, iterations, learning rate must be positive and exaggeration ≥ 1"));
        }
        Ok(())
    }
}

/// Result of calibrating one conditional row `P_{·|i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowFit {
    pub sigma: f64,
    /// Conditional probabilities over the supplied neighbours; sums to 1.
    pub probs: Vec<f64>,
    pub converged: bool,
}

fn row_probs(sq_dist: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let dmin = sq_dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = sq_dist.iter().map(|&d| (-(d - dmin) * beta).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let h = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>();
    (p, h)
}

/// Finds the Gaussian bandwidth whose conditional distribution over
/// `sq_dist` (squared distances to the other points) has perplexity
/// `2^H = target`, by bisection on the precision `β = 1/(2σ²)`.
pub fn perplexity_search(sq_dist: &[f64], target: f64) -> Result<RowFit> {
    if sq_dist.iter().filter(|d| d.is_finite()).count() < 2 || sq_dist.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("perplexity search needs at least two finite distances"));
    }
    if !(target >= 1.0) {
        return Err(Error::invalid(format!("target perplexity {target} must be ≥ 1")));
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    for _ in 0..PERPLEXITY_MAX_ITERS {
        let (probs, h) = row_probs(sq_dist, beta);
        let perp = h.exp2();
        if (perp - target).abs() <= PERPLEXITY_TOL {
            return Ok(RowFit { sigma: (0.5 / beta).sqrt(), probs, converged: true });
        }
        // Larger β sharpens the distribution and lowers perplexity.
        if perp > target {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
    }
    let mid = if hi.is_finite() { 0.5 * (lo + hi) } else { beta };
    log::warn!("perplexity search did not reach {target} within {PERPLEXITY_MAX_ITERS} iterations");
    let (probs, _) = row_probs(sq_dist, mid);
    Ok(RowFit { sigma: (0.5 / mid).sqrt(), probs, converged: false })
}

/// Row-major `n × n` squared Euclidean distances.
pub fn pairwise_sq_dist(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect();
    rows.concat()
}

/// Conditional rows `P_{j|i}` (row-major, zero diagonal; each row sums to 1).
pub fn conditional_p(features: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = features.len();
    let d = pairwise_sq_dist(features);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
        let fit = perplexity_search(&others, perplexity)?;
        let mut k = 0;
        for j in (0..n).filter(|&j| j != i) {
            p[i * n + j] = fit.probs[k];
            k += 1;
        }
    }
    Ok(p)
}

/// `P_ij = (P_{j|i} + P_{i|j}) / 2n`; sums to 1.
pub fn joint_p(features: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = features.len();
    let c = conditional_p(features, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// `KL(P‖Q)` and its gradient with respect to the row-major `n × dim` embedding `y`.
pub fn kl_and_grad(p: &[f64], y: &[f64], n: usize, dim: usize) -> (f64, Vec<f64>) {
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = (0..dim).map(|k| (y[i * dim + k] - y[j * dim + k]).powi(2)).sum();
                w[i * n + j] = 1.0 / (1.0 + d2);
                z += w[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    let mut grad = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let q = w[i * n + j] / z;
            if pij > 0.0 {
                kl += pij * (pij / q).ln();
            }
            let m = 4.0 * (pij - q) * w[i * n + j];
            for k in 0..dim {
                grad[i * dim + k] += m * (y[i * dim + k] - y[j * dim + k]);
            }
        }
    }
    (kl, grad)
}

/// Worst relative error between [`kl_and_grad`] and central differences over every coordinate.
pub fn kl_grad_check(p: &[f64], y: &[f64], n: usize, dim: usize) -> f64 {
    let (_, g) = kl_and_grad(p, y, n, dim);
    let h = crate::gradcheck::DEFAULT_STEP;
    let mut probe = y.to_vec();
    let mut worst = 0.0f64;
    for i in 0..y.len() {
        probe[i] = y[i] + h;
        let up = kl_and_grad(p, &probe, n, dim).0;
        probe[i] = y[i] - h;
        let down = kl_and_grad(p, &probe, n, dim).0;
        probe[i] = y[i];
        worst = worst.max(crate::gradcheck::relative_error(g[i], (up - down) / (2.0 * h)));
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// Row-major `n × dim`, centred at the origin.
    pub coords: Vec<f64>,
    pub dim: usize,
    pub kl_initial: f64,
    pub kl_final: f64,
}

impl TsneResult {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

fn recenter(y: &mut [f64], n: usize, dim: usize) {
    for k in 0..dim {
        let m = (0..n).map(|i| y[i * dim + k]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| y[i * dim + k] -= m);
    }
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
/// KL values are reported against the unexaggerated `P`.
pub fn tsne(features: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    cfg.validate(n)?;
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("t-SNE features must be non-empty, finite and of equal length"));
    }
    if features.iter().all(|f| f == &features[0]) {
        return Err(Error::invalid("t-SNE features are all identical"));
    }
    let p = joint_p(features, cfg.perplexity)?;
    let dim = cfg.dim;
    let mut rng = Rng::new(cfg.seed, 0);
    let mut y: Vec<f64> = (0..n * dim).map(|_| rng.normal() * 1e-4).collect();
    recenter(&mut y, n, dim);
    let kl_initial = kl_and_grad(&p, &y, n, dim).0;
    let p_ex: Vec<f64> = p.iter().map(|v| v * cfg.exaggeration).collect();
    let mut update = vec![0.0; n * dim];
    let mut gains = vec![1.0f64; n * dim];
    for it in 0..cfg.iterations {
        let pp = if it < cfg.exaggeration_iters { &p_ex } else { &p };
        let (_, g) = kl_and_grad(pp, &y, n, dim);
        let mom = if it < cfg.momentum_switch { cfg.momentum_initial } else { cfg.momentum_final };
        for k in 0..n * dim {
            gains[k] = if (g[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            update[k] = mom * update[k] - cfg.learning_rate * gains[k] * g[k];
            y[k] += update[k];
        }
        recenter(&mut y, n, dim);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("t-SNE diverged at iteration {it}")));
        }
    }
    let kl_final = kl_and_grad(&p, &y, n, dim).0;
    Ok(TsneResult { coords: y, dim, kl_initial, kl_final })
}

/// Mean silhouette coefficient; singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n < 2 {
        return Err(Error::invalid("silhouette needs ≥ 2 labelled points"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; classes.len()];
        let mut cnt = vec![0usize; classes.len()];
        for j in (0..n).filter(|&j| j != i) {
            let c = classes.binary_search(&labels[j]).unwrap();
            sum[c] += dist(&points[i], &points[j]);
            cnt[c] += 1;
        }
        let own = classes.binary_search(&labels[i]).unwrap();
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub synth: usize,
    pub real: usize,
    pub score: f64,
}

/// For each synthetic image, the real image of highest MS-SSIM (lowest index on ties).
pub fn nearest_real(synth: &[Tensor], real: &[Tensor], params: &SsimParams) -> Result<Vec<Match>> {
    if synth.is_empty() || real.is_empty() {
        return Err(Error::invalid("nearest_real needs non-empty synthetic and real sets"));
    }
    synth
        .par_iter()
        .enumerate()
        .map(|(s, img)| {
            let mut best = Match { synth: s, real: 0, score: f64::NEG_INFINITY };
            for (r, ref_img) in real.iter().enumerate() {
                let v = ms_ssim(img, ref_img, params)?;
                if v > best.score {
                    best = Match { synth: s, real: r, score: v };
                }
            }
            Ok(best)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSet {
    Real,
    Synth,
}

impl PointSet {
    pub fn as_str(self) -> &'static str {
        match self {
            PointSet::Real => "real",
            PointSet::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedPoint {
    pub id: usize,
    pub set: PointSet,
    pub class: u8,
    pub x: f64,
    pub y: f64,
}

pub fn embedding_csv(points: &[EmbedPoint]) -> String {
    let mut s = String::from("id,set,class,x,y\n");
    for p in points {
        writeln!(s, "{},{},{},{},{}", p.id, p.set.as_str(), p.class, p.x, p.y).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(seed: u64, per: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = Rng::new(seed, 0);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                f.push((0..5).map(|k| rng.normal() + if k == 0 { sep * c as f64 } else { 0.0 }).collect());
                l.push(c);
            }
        }
        (f, l)
    }

    #[test]
    fn uniform_row_is_uniform() {
        let fit = perplexity_search(&[4.0; 10], 10.0).unwrap();
        assert!(fit.converged);
        for p in fit.probs {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn near_neighbour_dominates_low_perplexity() {
        let mut d = vec![100.0; 9];
        d[3] = 1.0;
        let fit = perplexity_search(&d, 1.01).unwrap();
        // Direct evaluation at the returned bandwidth.
        let beta = 0.5 / (fit.sigma * fit.sigma);
        let w: Vec<f64> = d.iter().map(|&v| (-(v - 1.0) * beta).exp()).collect();
        let z: f64 = w.iter().sum();
        assert!((fit.probs[3] - w[3] / z).abs() < 1e-12);
        assert!(fit.probs[3] > 0.99);
        assert_eq!(fit, perplexity_search(&d, 1.01).unwrap());
    }

    #[test]
    fn perplexity_rejects_short_rows() {
        assert!(perplexity_search(&[1.0], 1.0).is_err());
        assert!(perplexity_search(&[1.0, f64::NAN], 1.5).is_err());
    }

    #[test]
    fn p_normalisation() {
        let (f, _) = clusters(1, 8, 3.0);
        let n = f.len();
        let c = conditional_p(&f, 4.0).unwrap();
        for i in 0..n {
            assert!((c[i * n..(i + 1) * n].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(c[i * n + i], 0.0);
        }
        let p = joint_p(&f, 4.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (f, _) = clusters(seed, 6, 2.0);
            let p = joint_p(&f, 3.0).unwrap();
            let mut rng = Rng::new(seed, 9);
            let y: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
            let e = kl_grad_check(&p, &y, 12, 2);
            assert!(e < 1e-4, "seed {seed}: {e}");
        }
    }

    #[test]
    fn separated_clusters_embed_separately() {
        let (f, l) = clusters(3, 20, 100.0);
        let cfg = TsneConfig { perplexity: 10.0, iterations: 300, ..Default::default() };
        let r = tsne(&f, &cfg).unwrap();
        assert!(r.kl_final < r.kl_initial);
        let pts: Vec<Vec<f64>> = (0..f.len()).map(|i| r.point(i).to_vec()).collect();
        assert!(silhouette(&pts, &l).unwrap() > 0.5);
        for k in 0..2 {
            let m: f64 = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
            assert!(m.abs() < 1e-9);
        }
        assert_eq!(r, tsne(&f, &cfg).unwrap());
    }

    #[test]
    fn tsne_rejects_bad_input() {
        let same = vec![vec![1.0, 2.0]; 20];
        assert!(tsne(&same, &TsneConfig { perplexity: 5.0, ..Default::default() }).is_err());
        let (f, _) = clusters(0, 5, 1.0);
        assert!(tsne(&f[..8], &TsneConfig { perplexity: 2.0, ..Default::default() }).is_err());
        assert!(tsne(&f, &TsneConfig::default()).is_err());
    }

    #[test]
    fn silhouette_known_value() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        // Every point has a = 1; b is the mean distance to the other pair.
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let b = [10.5, 9.5, 9.5, 10.5];
        let exact: f64 = b.iter().map(|b| (b - 1.0) / b).sum::<f64>() / 4.0;
        assert!((s - exact).abs() < 1e-12, "{s} vs {exact}");
    }

    #[test]
    fn nearest_real_finds_copy_and_breaks_ties_low() {
        let mut rng = Rng::new(5, 0);
        let real: Vec<Tensor> = (0..4).map(|_| crate::numerics::gaussian(&mut rng, &[32, 32]).map(|v| 0.5 + 0.1 * v)).collect();
        let synth = vec![real[2].clone(), real[1].clone()];
        let dup = vec![real[0].clone(), real[0].clone()];
        let p = SsimParams::default();
        let m = nearest_real(&synth, &real, &p).unwrap();
        assert_eq!((m[0].real, m[1].real), (2, 1));
        assert!((m[0].score - 1.0).abs() < 1e-12);
        let t = nearest_real(&real[..1], &dup, &p).unwrap();
        assert_eq!(t[0].real, 0);
        assert!(nearest_real(&[], &real, &p).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = embedding_csv(&[EmbedPoint { id: 3, set: PointSet::Synth, class: 4, x: 0.5, y: -1.0 }]);
        assert_eq!(s, "id,set,class,x,y\n3,synth,4,0.5,-1\n");
    }
}

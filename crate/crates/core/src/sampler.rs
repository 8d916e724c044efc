//! Reverse-process samplers with classifier-free guidance.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::denoiser::NoiseModel;
use crate::error::{Error, Result};
use crate::numerics::{gaussian, Rng, Tensor};
use crate::phantom::NUM_TOKENS;
use crate::schedule::NoiseSchedule;

/// Karras σ-grid curvature.
pub const RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ddpm,
    Euler,
    EulerAncestral,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ddpm" => Some(Self::Ddpm),
            "euler" => Some(Self::Euler),
            "euler_a" | "euler-a" | "euler_ancestral" => Some(Self::EulerAncestral),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ddpm => "ddpm",
            Self::Euler => "euler",
            Self::EulerAncestral => "euler_a",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub guidance: f64,
    pub pos_token: usize,
    /// Token for the negative branch; 0 is the unconditional token.
    pub neg_token: usize,
    pub seed: u64,
    /// RNG stream; batches give each sample its own stream.
    pub stream: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Euler,
            steps: 20,
            guidance: 4.0,
            pos_token: 1,
            neg_token: 0,
            seed: 0,
            stream: 0,
            height: 64,
            width: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.steps {
            return Err(Error::invalid(format!("steps {} outside 1..={}", self.steps, sched.steps)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::invalid("guidance scale must be finite and ≥ 0"));
        }
        if self.pos_token >= NUM_TOKENS || self.neg_token >= NUM_TOKENS {
            return Err(Error::invalid("conditioning tokens must be in 0..=5"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        Ok(())
    }
}

/// Wraps a model and counts prediction calls.
pub struct CountingModel<'a, M: NoiseModel + ?Sized> {
    pub inner: &'a M,
    calls: AtomicUsize,
}

impl<'a, M: NoiseModel + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: NoiseModel + ?Sized> NoiseModel for CountingModel<'_, M> {
    fn predict_noise(&self, x_t: &Tensor, t: f64, token: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_noise(x_t, t, token)
    }
}

/// Guided prediction `ε̂_neg + g·(ε̂_pos − ε̂_neg)`. The endpoints `g = 1`
/// and `g = 0` evaluate a single branch and return it unchanged.
pub fn cfg_predict<M: NoiseModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t: f64,
    guidance: f64,
    pos_token: usize,
    neg_token: usize,
) -> Result<Tensor> {
    if guidance == 1.0 {
        return model.predict_noise(x, t, pos_token);
    }
    if guidance == 0.0 {
        return model.predict_noise(x, t, neg_token);
    }
    let pos = model.predict_noise(x, t, pos_token)?;
    let neg = model.predict_noise(x, t, neg_token)?;
    neg.axpby(1.0 - guidance, &pos, guidance)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final state in data space (`[-1, 1]` nominal), before clamping.
    pub raw: Tensor,
    /// `raw` clamped to `[-1, 1]` and mapped to `[0, 1]`.
    pub image: Tensor,
    /// Σ |injected noise| over the chain; zero for deterministic samplers.
    pub injected_noise: f64,
}

fn finish(raw: Tensor, injected_noise: f64) -> SampleOutput {
    let image = raw.map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0);
    SampleOutput {
        raw,
        image,
        injected_noise,
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite sample state at step {step}")))
    }
}

/// Karras σ grid: `steps` points descending from σ_max to σ_min, evenly
/// spaced in `σ^(1/ρ)`, followed by a terminal 0.
pub fn karras_sigmas(sigma_min: f64, sigma_max: f64, steps: usize) -> Vec<f64> {
    let (lo, hi) = (sigma_min.powf(1.0 / RHO), sigma_max.powf(1.0 / RHO));
    let mut out: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                sigma_max
            } else {
                (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(RHO)
            }
        })
        .collect();
    out.push(0.0);
    out
}

/// Ancestral split of a step σ → σ_next into (σ_down, σ_up).
pub fn ancestral_split(sigma: f64, sigma_next: f64) -> (f64, f64) {
    let up = (sigma_next * sigma_next * (sigma * sigma - sigma_next * sigma_next) / (sigma * sigma))
        .max(0.0)
        .sqrt()
        .min(sigma_next);
    let down = (sigma_next * sigma_next - up * up).max(0.0).sqrt();
    (down, up)
}

/// Evenly strided timesteps `τ_1 < … < τ_S = T`.
pub fn ddpm_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Ancestral DDPM chain over `cfg.steps` strided timesteps (the exact
/// discrete chain when `steps == T`).
pub fn ddpm_sample<M: NoiseModel + ?Sized>(model: &M, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<SampleOutput> {
    cfg.validate(sched)?;
    let mut rng = Rng::new(cfg.seed, cfg.stream);
    let shape = [cfg.height, cfg.width];
    let mut x = gaussian(&mut rng, &shape);
    let taus = ddpm_timesteps(sched.steps, cfg.steps);
    let mut injected = 0.0;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[prev]);
        let beta = 1.0 - ab / ab_prev;
        let alpha = 1.0 - beta;
        let eps = cfg_predict(model, &x, t as f64, cfg.guidance, cfg.pos_token, cfg.neg_token)?;
        let coef = beta / (1.0 - ab).sqrt();
        let mut next = x.axpby(1.0, &eps, -coef)?.map(|v| v / alpha.sqrt());
        if prev > 0 {
            let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
            let z = gaussian(&mut rng, &shape);
            injected += std * z.data().iter().map(|v| v.abs()).sum::<f64>();
            next = next.axpby(1.0, &z, std)?;
        }
        x = next;
        check_finite(&x, taus.len() - i)?;
    }
    Ok(finish(x, injected))
}

fn euler_chain<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    ancestral: bool,
) -> Result<SampleOutput> {
    cfg.validate(sched)?;
    let mut rng = Rng::new(cfg.seed, cfg.stream);
    let shape = [cfg.height, cfg.width];
    let sigmas = karras_sigmas(sched.sigma_min(), sched.sigma_max(), cfg.steps);
    let mut x = gaussian(&mut rng, &shape).map(|v| v * sigmas[0]);
    let mut injected = 0.0;
    for i in 0..cfg.steps {
        let (sigma, sigma_next) = (sigmas[i], sigmas[i + 1]);
        let c_in = 1.0 / (sigma * sigma + 1.0).sqrt();
        let t = sched.t_of_sigma(sigma);
        // With an ε-predicting model the ODE derivative (x − x̂0)/σ is ε̂ itself.
        let d = cfg_predict(model, &x.map(|v| v * c_in), t, cfg.guidance, cfg.pos_token, cfg.neg_token)?;
        if ancestral {
            let (down, up) = ancestral_split(sigma, sigma_next);
            x = x.axpby(1.0, &d, down - sigma)?;
            if up > 0.0 {
                let z = gaussian(&mut rng, &shape);
                injected += up * z.data().iter().map(|v| v.abs()).sum::<f64>();
                x = x.axpby(1.0, &z, up)?;
            }
        } else {
            x = x.axpby(1.0, &d, sigma_next - sigma)?;
        }
        check_finite(&x, i + 1)?;
    }
    Ok(finish(x, injected))
}

/// Deterministic first-order ODE sampler on the Karras σ grid.
pub fn euler_sample<M: NoiseModel + ?Sized>(model: &M, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<SampleOutput> {
    euler_chain(model, sched, cfg, false)
}

/// Euler step to σ_down plus fresh noise of scale σ_up at every step.
pub fn euler_ancestral_sample<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    euler_chain(model, sched, cfg, true)
}

pub fn sample<M: NoiseModel + ?Sized>(model: &M, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<SampleOutput> {
    match cfg.method {
        Method::Ddpm => ddpm_sample(model, sched, cfg),
        Method::Euler => euler_sample(model, sched, cfg),
        Method::EulerAncestral => euler_ancestral_sample(model, sched, cfg),
    }
}

/// `n` samples of one configuration, each on its own RNG stream
/// (`cfg.stream + i`). Results are independent of thread count.
pub fn sample_batch<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<SampleOutput>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let c = SamplerConfig {
                stream: cfg.stream + i as u64,
                ..cfg.clone()
            };
            sample(model, sched, &c)
        })
        .collect()
}

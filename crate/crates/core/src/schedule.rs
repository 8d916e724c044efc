//! Discrete-time noise schedule and the forward (noising) process.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β linearly spaced.
    Linear,
    /// √β linearly spaced.
    ScaledLinear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Self::Linear),
            "scaled" | "scaled_linear" => Some(Self::ScaledLinear),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::ScaledLinear => "scaled",
        }
    }
}

/// Tables indexed by `t = 0..=T`; entry 0 is the clean-data convention
/// (`alpha_bar[0] = 1`, `beta[0] = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub posterior_std: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < start ≤ end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (steps - 1) as f64
            }
        };
        let mut beta = vec![0.0];
        for i in 0..steps {
            beta.push(match kind {
                ScheduleKind::Linear => lerp(beta_start, beta_end, i),
                ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            });
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        }
        let mut posterior_std = vec![0.0];
        for t in 1..=steps {
            let var = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
            posterior_std.push(var.max(0.0).sqrt());
        }
        Ok(Self {
            kind,
            steps,
            beta,
            alpha,
            alpha_bar,
            posterior_std,
        })
    }

    /// Default training schedule: linear β from 1e-4 to 0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        Self::new(ScheduleKind::Linear, 1000, 1e-4, 0.02).expect("valid defaults")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            eps.ensure_shape(x0.shape())?;
            return Ok(x0.clone());
        }
        let ab = self.alpha_bar[t];
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Solves the forward process for `x0` given `x_t` and the noise that produced it.
    pub fn invert(&self, xt: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        let r = xt.axpby(1.0, eps, -(1.0 - ab).sqrt())?;
        Ok(r.map(|v| v / ab.sqrt()))
    }

    /// Variance-exploding noise level `σ_t = √((1 − ᾱ_t) / ᾱ_t)`.
    pub fn sigma_of_t(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(sigma_from_alpha_bar(self.alpha_bar[t]))
    }

    pub fn sigma_min(&self) -> f64 {
        sigma_from_alpha_bar(self.alpha_bar[1])
    }

    pub fn sigma_max(&self) -> f64 {
        sigma_from_alpha_bar(self.alpha_bar[self.steps])
    }

    /// Fractional timestep for an arbitrary σ, by linear interpolation of
    /// `ln σ_t` between neighbouring integer steps (clamped to `[1, T]`).
    pub fn t_of_sigma(&self, sigma: f64) -> f64 {
        let ls = sigma.max(1e-300).ln();
        let log_sigma = |t: usize| sigma_from_alpha_bar(self.alpha_bar[t]).ln();
        if ls <= log_sigma(1) {
            return 1.0;
        }
        if ls >= log_sigma(self.steps) {
            return self.steps as f64;
        }
        // σ_t is strictly increasing; binary search the bracketing pair.
        let (mut lo, mut hi) = (1usize, self.steps);
        while hi - lo > 1 {
            let m = (lo + hi) / 2;
            if log_sigma(m) <= ls {
                lo = m;
            } else {
                hi = m;
            }
        }
        let (a, b) = (log_sigma(lo), log_sigma(hi));
        lo as f64 + (ls - a) / (b - a)
    }

    /// `t,beta,alpha_bar,sigma` with `sigma` the posterior standard deviation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar,sigma\n");
        for t in 0..=self.steps {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e}",
                t, self.beta[t], self.alpha_bar[t], self.posterior_std[t]
            );
        }
        s
    }
}

pub fn sigma_from_alpha_bar(ab: f64) -> f64 {
    ((1.0 - ab) / ab).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    #[test]
    fn single_step() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1, 0.02, 0.02).unwrap();
        assert_eq!(s.alpha_bar[1], 0.98);
        assert_eq!(s.posterior_std[1], 0.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn monotone_tables() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = NoiseSchedule::new(kind, 1000, 1e-4, 0.02).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            for t in 1..=1000 {
                assert!(s.beta[t] > 0.0 && s.beta[t] < 1.0);
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            }
            for t in 1..1000 {
                assert!(s.sigma_of_t(t + 1).unwrap() > s.sigma_of_t(t).unwrap());
            }
        }
    }

    #[test]
    fn t_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let x = gaussian(&mut Rng::new(1, 0), &[3, 3]);
        let e = gaussian(&mut Rng::new(1, 1), &[3, 3]);
        assert_eq!(s.add_noise(&x, &e, 0).unwrap(), x);
        assert!(s.add_noise(&x, &e, 1001).is_err());
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let s = NoiseSchedule::default_linear();
        let e = gaussian(&mut Rng::new(2, 0), &[8]);
        let xt = s.add_noise(&Tensor::zeros(&[8]), &e, 500).unwrap();
        let k = (1.0 - s.alpha_bar[500]).sqrt();
        for (a, b) in xt.data().iter().zip(e.data()) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn t_of_sigma_hits_integer_steps() {
        let s = NoiseSchedule::default_linear();
        for t in [1usize, 2, 17, 500, 999, 1000] {
            let sig = s.sigma_of_t(t).unwrap();
            assert!((s.t_of_sigma(sig) - t as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_header() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("t,beta,alpha_bar,sigma\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}

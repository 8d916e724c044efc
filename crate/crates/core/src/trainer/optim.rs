//! AdamW with either full-precision or blockwise 8-bit moment storage.

use std::collections::HashMap;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::numerics::q8::{q8_decode_into, q8_encode_slice, QuantBlock8, DEFAULT_BLOCK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatePrecision {
    Fp32,
    Q8,
}

impl StatePrecision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fp32" => Some(Self::Fp32),
            "q8" | "8bit" => Some(Self::Q8),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fp32 => "fp32",
            Self::Q8 => "q8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments of one parameter tensor.
///
/// The 8-bit form stores the first moment directly and the second moment as
/// `√v`, both with per-block absmax scales.
#[derive(Debug, Clone)]
enum Moments {
    Fp32 { m: Vec<f32>, v: Vec<f32> },
    Q8 { m: QuantBlock8, v_root: QuantBlock8 },
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub config: AdamWConfig,
    pub precision: StatePrecision,
    pub block_size: usize,
    step: u64,
    /// Steps skipped because a gradient was non-finite.
    pub rejected: u64,
    moments: HashMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Rejected,
}

/// Decoupled weight decay applies to weight matrices and adapters only.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl OptState {
    pub fn new(config: AdamWConfig, precision: StatePrecision) -> Self {
        Self {
            config,
            precision,
            block_size: DEFAULT_BLOCK,
            step: 0,
            rejected: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn fresh(&self, n: usize) -> Moments {
        match self.precision {
            StatePrecision::Fp32 => Moments::Fp32 {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            StatePrecision::Q8 => Moments::Q8 {
                m: QuantBlock8::zeros(&[n], self.block_size),
                v_root: QuantBlock8::zeros(&[n], self.block_size),
            },
        }
    }

    /// Current moments of `name`, decoded to `f64`.
    pub fn moments(&self, name: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        self.moments.get(name).map(|mo| decode(mo))
    }

    /// One bias-corrected AdamW update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<StepOutcome> {
        if !grads.all_finite() {
            self.rejected += 1;
            log::warn!("AdamW step rejected: non-finite gradient ({} so far)", self.rejected);
            return Ok(StepOutcome::Rejected);
        }
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            p.ensure_shape(g.shape())?;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let n = g.len();
            let mo = match self.moments.remove(name) {
                Some(mo) => mo,
                None => self.fresh(n),
            };
            let (mut m, mut v) = decode(&mo);
            let p = params.get_mut(name).expect("checked above").data_mut();
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // A second moment quantized to zero carries no scale information; skip the adaptive term.
                let adam = if v_hat > 0.0 { m_hat / (v_hat.sqrt() + c.eps) } else { 0.0 };
                p[i] -= lr * (adam + wd * p[i]);
            }
            self.moments.insert(name.to_string(), encode(self.precision, self.block_size, &m, &v)?);
        }
        Ok(StepOutcome::Applied)
    }
}

fn decode(mo: &Moments) -> (Vec<f64>, Vec<f64>) {
    match mo {
        Moments::Fp32 { m, v } => (
            m.iter().map(|&x| x as f64).collect(),
            v.iter().map(|&x| x as f64).collect(),
        ),
        Moments::Q8 { m, v_root } => {
            let mut md = vec![0.0; m.len()];
            let mut vr = vec![0.0; v_root.len()];
            q8_decode_into(m, &mut md);
            q8_decode_into(v_root, &mut vr);
            (md, vr.into_iter().map(|r| r * r).collect())
        }
    }
}

fn encode(precision: StatePrecision, block: usize, m: &[f64], v: &[f64]) -> Result<Moments> {
    Ok(match precision {
        StatePrecision::Fp32 => Moments::Fp32 {
            m: m.iter().map(|&x| x as f32).collect(),
            v: v.iter().map(|&x| x as f32).collect(),
        },
        StatePrecision::Q8 => {
            let root: Vec<f64> = v.iter().map(|x| x.max(0.0).sqrt()).collect();
            Moments::Q8 {
                m: q8_encode_slice(m, &[m.len()], block)?,
                v_root: q8_encode_slice(&root, &[root.len()], block)?,
            }
        }
    })
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x.w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for prec in [StatePrecision::Fp32, StatePrecision::Q8] {
            let mut st = OptState::new(cfg, prec);
            let mut p = single(0.5);
            st.step(&mut p, &single(1.0), 1e-3).unwrap();
            // m̂ = g, v̂ = g², so Δ = -lr · 1 / (1 + ε)
            let expected = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
            assert!((p.get("x.w").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for prec in [StatePrecision::Fp32, StatePrecision::Q8] {
            let mut st = OptState::new(cfg, prec);
            let mut p = single(0.7);
            for _ in 0..10 {
                st.step(&mut p, &single(0.0), 1e-2).unwrap();
            }
            assert_eq!(p.get("x.w").unwrap().data()[0], 0.7);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut st = OptState::new(AdamWConfig::default(), StatePrecision::Fp32);
        let mut p = single(1.0);
        let out = st.step(&mut p, &single(f64::NAN), 1e-2).unwrap();
        assert_eq!(out, StepOutcome::Rejected);
        assert_eq!(st.rejected, 1);
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.get("x.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut st = OptState::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, StatePrecision::Fp32);
        let mut p = ParamStore::new();
        p.insert("l.w", Tensor::new(vec![1], vec![1.0]).unwrap());
        p.insert("l.b", Tensor::new(vec![1], vec![1.0]).unwrap());
        let g = p.zeros_like(|_| true);
        st.step(&mut p, &g, 0.1).unwrap();
        assert!((p.get("l.w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.get("l.b").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.sq_norm().sqrt());
    }
}

//! Central finite-difference verification of analytic gradients.

use crate::nn::ParamStore;
use crate::numerics::Rng;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor; keeps near-zero gradients from inflating the ratio.
pub const DENOM_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `grads` against central differences of `loss` over a random
/// `fraction` of the coordinates of every tensor named in `grads` (at least
/// one per tensor). Returns the worst relative error.
pub fn check(
    params: &ParamStore,
    grads: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    fraction: f64,
    rng: &mut Rng,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, g) in grads.iter() {
        let n = g.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        for &i in &idx[..k] {
            let orig = params.get(name).expect("grad names a parameter").data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + DEFAULT_STEP;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - DEFAULT_STEP;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let e = relative_error(g.data()[i], numeric);
            if e > worst {
                log::debug!("gradcheck {name}[{i}]: analytic {} numeric {numeric}", g.data()[i]);
            }
            worst = worst.max(e);
        }
    }
    worst
}

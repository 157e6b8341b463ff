//! Flow-matching objective and deterministic Euler sampler.
//!
//! Rectified-flow convention: linear interpolant `x_t = (1-t) x0 + t x1`
//! with constant velocity target `x1 - x0`, time drawn uniformly.

use crate::error::{HbError, Result};
use crate::math;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x1: Vec<f64>,
    pub x0: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

impl FlowBatch {
    /// Build the interpolant for a fixed `(t, x0)`; used by tests and by the
    /// ablation analyzer, which must reuse identical draws across reruns.
    pub fn with_draws(x1: Vec<f64>, x0: Vec<f64>, t: f64) -> FlowBatch {
        debug_assert_eq!(x1.len(), x0.len());
        let x_t: Vec<f64> = x0
            .iter()
            .zip(&x1)
            .map(|(n, c)| (1.0 - t) * n + t * c)
            .collect();
        let v_target: Vec<f64> = x1.iter().zip(&x0).map(|(c, n)| c - n).collect();
        FlowBatch {
            x1,
            x0,
            t,
            x_t,
            v_target,
        }
    }
}

/// Sample `t ~ U(0,1)` and `x0 ~ N(0,1)` i.i.d. for one clean sample.
pub fn make_flow_batch(x1: Vec<f64>, rng: &mut Rng) -> FlowBatch {
    let t = rng.uniform();
    let mut x0 = vec![0.0; x1.len()];
    rng.fill_normal(&mut x0, 1.0);
    FlowBatch::with_draws(x1, x0, t)
}

/// Mean squared error over all elements.
pub fn fm_loss(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Gradient of `fm_loss` w.r.t. `pred`, scaled by `loss_scale`.
pub fn fm_loss_backward(pred: &[f64], target: &[f64], loss_scale: f64, d_pred: &mut [f64]) {
    let c = 2.0 * loss_scale / pred.len() as f64;
    for i in 0..pred.len() {
        d_pred[i] = c * (pred[i] - target[i]);
    }
}

/// Integrate `x' = v(x, t)` from t=0 to t=1 with fixed-step Euler, starting
/// from standard-normal noise. Deterministic given the rng state.
pub fn euler_sample<F>(mut velocity: F, n: usize, steps: usize, rng: &mut Rng) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(HbError::Input("euler sampler needs steps >= 1".into()));
    }
    let mut x = vec![0.0; n];
    rng.fill_normal(&mut x, 1.0);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(&x, t)?;
        debug_assert_eq!(v.len(), n);
        for (xv, vv) in x.iter_mut().zip(&v) {
            *xv += dt * vv;
        }
        if !math::all_finite(&x) {
            return Err(HbError::Divergence {
                step: k as u64,
                detail: "non-finite state in euler sampler".into(),
            });
        }
    }
    Ok(x)
}

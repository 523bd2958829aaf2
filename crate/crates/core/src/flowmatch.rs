//! Flow-matching math on linear noise-to-data paths.
//!
//! `x_t = t x1 + (1 - t) x0`, with constant velocity `x1 - x0`. Time flows
//! from noise (`t = 0`) to data (`t = 1`).

use ndarray::{Array, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A point on the path: sample plus flow time.
#[derive(Clone, Debug)]
pub struct FlowState<T, D: Dimension> {
    pub sample: Array<T, D>,
    pub t: f64,
}

impl<T: Real, D: Dimension> FlowState<T, D> {
    pub fn new(sample: Array<T, D>, t: f64) -> Result<Self> {
        check_t(t)?;
        if !sample.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { module: "flowmatch", location: "FlowState".into(), norm: f64::NAN });
        }
        Ok(Self { sample, t })
    }
}

/// Logit-normal timestep distribution: `sigmoid(z)`, `z ~ N(location, scale^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitNormalParams {
    pub location: f64,
    pub scale: f64,
}

impl LogitNormalParams {
    /// Base-model training distribution.
    pub const STANDARD: Self = Self { location: 0.0, scale: 1.0 };
    /// Fusion training distribution, shifted towards noisier times.
    pub const SHIFTED: Self = Self { location: -1.0, scale: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.location.is_finite() || !self.scale.is_finite() {
            return Err(Error::Config(format!("invalid logit-normal params {self:?}")));
        }
        Ok(())
    }
}

/// Classifier-free guidance weight and Euler step count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub weight: f64,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { weight: 5.0, steps: 64 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("guidance steps must be >= 1".into()));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!("guidance weight must be >= 0, got {}", self.weight)));
        }
        Ok(())
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::contract("flowmatch", format!("flow time {t} outside [0, 1]")))
    }
}

fn check_shapes<T, D: Dimension>(a: &Array<T, D>, b: &Array<T, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            "flowmatch",
            format!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `t x1 + (1 - t) x0`.
pub fn interpolate<T: Real, D: Dimension>(x0: &Array<T, D>, x1: &Array<T, D>, t: f64) -> Result<Array<T, D>> {
    check_shapes(x0, x1, "interpolate")?;
    check_t(t)?;
    let (a, b) = (T::of(t), T::of(1.0 - t));
    Ok(Zip::from(x0).and(x1).map_collect(|&n, &d| a * d + b * n))
}

/// Velocity of the linear path, `x1 - x0`.
pub fn velocity_target<T: Real, D: Dimension>(x0: &Array<T, D>, x1: &Array<T, D>) -> Result<Array<T, D>> {
    check_shapes(x0, x1, "velocity_target")?;
    Ok(x1 - x0)
}

/// Mean squared error between a predicted velocity and `x1 - x0`.
pub fn fm_loss<T: Real, D: Dimension>(pred: &Array<T, D>, x0: &Array<T, D>, x1: &Array<T, D>) -> Result<f64> {
    check_shapes(pred, x0, "fm_loss")?;
    check_shapes(x0, x1, "fm_loss")?;
    let mut sum = 0.0;
    let mut finite = true;
    Zip::from(pred).and(x0).and(x1).for_each(|&p, &n, &d| {
        finite &= p.is_finite() && n.is_finite() && d.is_finite();
        let e = p.f64() - (d.f64() - n.f64());
        sum += e * e;
    });
    if !finite {
        return Err(Error::NonFinite { module: "flowmatch", location: "fm_loss input".into(), norm: f64::NAN });
    }
    Ok(sum / pred.len().max(1) as f64)
}

/// Analytic gradient of [`fm_loss`] with respect to `pred`.
pub fn fm_loss_grad<T: Real, D: Dimension>(pred: &Array<T, D>, x0: &Array<T, D>, x1: &Array<T, D>) -> Result<Array<T, D>> {
    check_shapes(pred, x0, "fm_loss_grad")?;
    check_shapes(x0, x1, "fm_loss_grad")?;
    let c = T::of(2.0 / pred.len().max(1) as f64);
    Ok(Zip::from(pred).and(x0).and(x1).map_collect(|&p, &n, &d| c * (p - (d - n))))
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws one flow time from the logit-normal distribution, strictly inside (0, 1).
pub fn sample_t<R: Rng + ?Sized>(params: &LogitNormalParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let t = sigmoid(params.location + params.scale * z);
    t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `t = 1` with `steps` forward
/// Euler steps on the left-endpoint grid `t_k = k / steps`.
pub fn euler_sample<T, D, F>(mut velocity: F, x0: &Array<T, D>, steps: usize) -> Result<Array<T, D>>
where
    T: Real,
    D: Dimension,
    F: FnMut(&Array<T, D>, f64) -> Result<Array<T, D>>,
{
    if steps == 0 {
        return Err(Error::contract("flowmatch", "euler_sample needs steps >= 1"));
    }
    let dt = 1.0 / steps as f64;
    let dt_t = T::of(dt);
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = velocity(&x, t)?;
        check_shapes(&x, &v, "euler_sample velocity")?;
        if !v.iter().all(|e| e.is_finite()) {
            let norm = v.iter().map(|e| e.f64() * e.f64()).sum::<f64>().sqrt();
            return Err(Error::NonFinite { module: "flowmatch", location: format!("euler step {k}"), norm });
        }
        Zip::from(&mut x).and(&v).for_each(|xe, &ve| *xe = *xe + dt_t * ve);
    }
    Ok(x)
}

/// `v_uncond + weight (v_cond - v_uncond)`.
pub fn cfg_combine<T: Real, D: Dimension>(v_cond: &Array<T, D>, v_uncond: &Array<T, D>, weight: f64) -> Result<Array<T, D>> {
    check_shapes(v_cond, v_uncond, "cfg_combine")?;
    let w = T::of(weight);
    Ok(Zip::from(v_cond).and(v_uncond).map_collect(|&c, &u| u + w * (c - u)))
}

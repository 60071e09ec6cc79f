//! Stochastic interpolants between noise (`tau = 0`) and data (`tau = 1`).
//!
//! `o_tau = alpha_tau * o_1 + sigma_tau * eps`. The network is trained to
//! predict `o_1`; score and velocity are recovered from that prediction:
//!
//! ```text
//! s(o, tau) = -(o - alpha * o_hat) / sigma^2
//! v(o, tau) = s * (alpha_dot * sigma^2 / alpha - sigma * sigma_dot) + (alpha_dot / alpha) * o
//! ```
//!
//! Both expressions are singular where `alpha` or `sigma` vanish, i.e. at the
//! two ends of `[0, 1]`.

use std::f64::consts::FRAC_PI_2;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `alpha = tau`, `sigma = 1 - tau`.
    #[default]
    Linear,
    /// `alpha = sin(pi tau / 2)`, `sigma = cos(pi tau / 2)`.
    Gvp,
}

/// `(alpha, sigma)` and their derivatives at one diffusion time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

impl Schedule {
    pub fn eval(self, tau: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Range {
                what: "diffusion time",
                detail: format!("tau must lie in [0, 1], got {tau}"),
            });
        }
        Ok(match self {
            Schedule::Linear => ScheduleValues {
                alpha: tau,
                sigma: 1.0 - tau,
                alpha_dot: 1.0,
                sigma_dot: -1.0,
            },
            Schedule::Gvp => {
                let (s, c) = (FRAC_PI_2 * tau).sin_cos();
                ScheduleValues {
                    alpha: s,
                    sigma: c,
                    alpha_dot: FRAC_PI_2 * c,
                    sigma_dot: -FRAC_PI_2 * s,
                }
            }
        })
    }
}

/// How the reparameterizations treat diffusion times near the singular ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "eps")]
pub enum SingularityPolicy {
    /// Fail whenever the formula divides by zero.
    Strict,
    /// Evaluate at `tau` clamped into `[eps, 1 - eps]`.
    Clamp(f64),
}

impl Default for SingularityPolicy {
    fn default() -> Self {
        SingularityPolicy::Clamp(1e-3)
    }
}

impl SingularityPolicy {
    fn resolve(self, tau: f64) -> f64 {
        match self {
            SingularityPolicy::Strict => tau,
            SingularityPolicy::Clamp(eps) => tau.clamp(eps, 1.0 - eps),
        }
    }
}

/// Output of a reparameterization together with the diffusion time actually used.
#[derive(Debug, Clone)]
pub struct Reparameterized {
    pub value: Tensor,
    pub tau: f64,
    pub clamped: bool,
}

/// One interpolant draw for training.
#[derive(Debug, Clone)]
pub struct InterpolantSample {
    pub clean: Tensor,
    pub noise: Tensor,
    pub tau: f64,
    pub interpolated: Tensor,
}

impl InterpolantSample {
    pub fn new(clean: Tensor, noise: Tensor, tau: f64, schedule: Schedule) -> Result<Self> {
        let interpolated = interpolate(&clean, &noise, tau, schedule)?;
        Ok(Self {
            clean,
            noise,
            tau,
            interpolated,
        })
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `alpha_tau * o1 + sigma_tau * eps` for one diffusion time.
pub fn interpolate(o1: &Tensor, eps: &Tensor, tau: f64, schedule: Schedule) -> Result<Tensor> {
    check_same_shape(o1, eps, "interpolate")?;
    let v = schedule.eval(tau)?;
    Ok(((o1 * v.alpha)? + (eps * v.sigma)?)?)
}

/// Per-sample diffusion times along the leading axis of `o1`.
pub fn interpolate_batch(o1: &Tensor, eps: &Tensor, taus: &[f64], schedule: Schedule) -> Result<Tensor> {
    check_same_shape(o1, eps, "interpolate_batch")?;
    let batch = o1.dims()[0];
    if taus.len() != batch {
        return Err(Error::Shape(format!("{} diffusion times for batch of {batch}", taus.len())));
    }
    let mut alphas = Vec::with_capacity(batch);
    let mut sigmas = Vec::with_capacity(batch);
    for &tau in taus {
        let v = schedule.eval(tau)?;
        alphas.push(v.alpha);
        sigmas.push(v.sigma);
    }
    let mut shape = vec![1usize; o1.rank()];
    shape[0] = batch;
    let alpha = Tensor::from_vec(alphas, shape.as_slice(), o1.device())?.to_dtype(o1.dtype())?;
    let sigma = Tensor::from_vec(sigmas, shape.as_slice(), o1.device())?.to_dtype(o1.dtype())?;
    Ok((o1.broadcast_mul(&alpha)? + eps.broadcast_mul(&sigma)?)?)
}

/// Mean squared error between the predicted and the clean data.
pub fn data_prediction_loss(o_hat: &Tensor, o1: &Tensor) -> Result<Tensor> {
    check_same_shape(o_hat, o1, "data_prediction_loss")?;
    Ok((o_hat - o1)?.sqr()?.mean_all()?)
}

/// Score estimate from a data prediction.
pub fn score_from_data_prediction(
    o_tau: &Tensor,
    o_hat: &Tensor,
    tau: f64,
    schedule: Schedule,
    policy: SingularityPolicy,
) -> Result<Reparameterized> {
    check_same_shape(o_tau, o_hat, "score_from_data_prediction")?;
    let used = policy.resolve(tau);
    let v = schedule.eval(used)?;
    if v.sigma == 0.0 {
        return Err(Error::Singular { tau });
    }
    let value = score_with(o_tau, o_hat, v)?;
    Ok(Reparameterized {
        value,
        tau: used,
        clamped: used != tau,
    })
}

fn score_with(o_tau: &Tensor, o_hat: &Tensor, v: ScheduleValues) -> Result<Tensor> {
    Ok(((o_tau - (o_hat * v.alpha)?)? * (-1.0 / (v.sigma * v.sigma)))?)
}

/// Velocity estimate from a data prediction. The combination is evaluated in
/// 64-bit precision and returned in the dtype of `o_tau`, since the two terms
/// grow like `1 / alpha` near `tau = 0` and mostly cancel.
pub fn velocity_from_data_prediction(
    o_tau: &Tensor,
    o_hat: &Tensor,
    tau: f64,
    schedule: Schedule,
    policy: SingularityPolicy,
) -> Result<Reparameterized> {
    check_same_shape(o_tau, o_hat, "velocity_from_data_prediction")?;
    let used = policy.resolve(tau);
    let v = schedule.eval(used)?;
    if v.sigma == 0.0 || v.alpha == 0.0 {
        return Err(Error::Singular { tau });
    }
    let dtype = o_tau.dtype();
    let o = o_tau.to_dtype(DType::F64)?;
    let o_hat = o_hat.to_dtype(DType::F64)?;
    let score = score_with(&o, &o_hat, v)?;
    let coeff = v.alpha_dot * v.sigma * v.sigma / v.alpha - v.sigma * v.sigma_dot;
    let value = ((score * coeff)? + (o * (v.alpha_dot / v.alpha))?)?.to_dtype(dtype)?;
    Ok(Reparameterized {
        value,
        tau: used,
        clamped: used != tau,
    })
}

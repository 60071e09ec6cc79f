//! Fixed-step Euler and adaptive Dormand-Prince integration over `tau in [0, 1]`.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Velocity field `v(z, tau)`.
pub trait VelocityField {
    fn eval(&self, z: &Tensor, tau: f64) -> Result<Tensor>;
}

/// Wraps a closure as a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn eval(&self, z: &Tensor, tau: f64) -> Result<Tensor> {
        (self.0)(z, tau)
    }
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub z: Tensor,
    /// Number of field evaluations.
    pub nfe: usize,
    /// Accepted steps.
    pub steps: usize,
    pub rejected: usize,
}

fn finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

fn checked<V: VelocityField + ?Sized>(field: &V, z: &Tensor, tau: f64, step: usize) -> Result<Tensor> {
    let v = field.eval(z, tau).map_err(|e| e.context(format!("velocity at step {step}")))?;
    if !finite(&v)? {
        return Err(Error::Integration { step });
    }
    Ok(v)
}

/// `z_{k+1} = z_k + v(z_k, k / steps) / steps`.
pub fn integrate_euler<V: VelocityField + ?Sized>(field: &V, z0: &Tensor, steps: usize) -> Result<Integration> {
    if steps == 0 {
        return Err(Error::Config("Euler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let v = checked(field, &z, k as f64 / steps as f64, k)?;
        z = (z + (v * dt)?)?;
    }
    Ok(Integration {
        z,
        nfe: steps,
        steps,
        rejected: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            initial_step: 0.05,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn combine(z: &Tensor, ks: &[Tensor], coeffs: &[f64], h: f64) -> Result<Tensor> {
    let mut out = z.clone();
    for (k, c) in ks.iter().zip(coeffs) {
        if *c != 0.0 {
            out = (out + (k * (h * c))?)?;
        }
    }
    Ok(out)
}

/// Dormand-Prince 5(4) with first-same-as-last reuse.
pub fn integrate_dopri5<V: VelocityField + ?Sized>(field: &V, z0: &Tensor, opts: AdaptiveOptions) -> Result<Integration> {
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::Config("adaptive tolerances must be positive".into()));
    }
    let mut t = 0.0f64;
    let mut h = opts.initial_step.clamp(1e-6, 1.0);
    let mut z = z0.clone();
    let mut nfe = 0usize;
    let mut k1 = checked(field, &z, t, 0)?;
    nfe += 1;
    let (mut steps, mut rejected) = (0usize, 0usize);
    while t < 1.0 - 1e-12 {
        if steps + rejected >= opts.max_steps {
            return Err(Error::Integration { step: steps });
        }
        h = h.min(1.0 - t);
        let mut ks = vec![k1.clone()];
        for stage in 1..7 {
            let zi = combine(&z, &ks, &A[stage][..stage], h)?;
            ks.push(checked(field, &zi, t + C[stage] * h, steps)?);
            nfe += 1;
        }
        let z5 = combine(&z, &ks, &B5, h)?;
        let z4 = combine(&z, &ks, &B4, h)?;
        let scale = ((z.abs()?.maximum(&z5.abs()?)? * opts.rtol)? + opts.atol)?;
        let err = ((z5.clone() - z4)? / scale)?
            .to_dtype(DType::F64)?
            .sqr()?
            .mean_all()?
            .to_scalar::<f64>()?
            .sqrt();
        if !err.is_finite() {
            return Err(Error::Integration { step: steps });
        }
        if err <= 1.0 {
            t += h;
            z = z5;
            k1 = ks.pop().expect("seven stages");
            steps += 1;
        } else {
            rejected += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    Ok(Integration { z, nfe, steps, rejected })
}

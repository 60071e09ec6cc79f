//! Forecast generation by integrating the reparameterized velocity field.

mod ode;

use std::time::Instant;

use candle_core::{Device, Tensor};
use ndarray::{s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{ConditioningBatch, SecondStage};
use crate::error::{Error, Result};
use crate::first_stage::{reconstruction_error, FirstStage};
use crate::identifiers::IdentifierAssignment;
use crate::interpolants::{velocity_from_data_prediction, SingularityPolicy};
use crate::types::{SystemState, Trajectory, TrajectoryMeta, TrajectorySlice};

pub use ode::{integrate_dopri5, integrate_euler, AdaptiveOptions, FnField, Integration, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorKind {
    #[default]
    EulerFixed,
    Adaptive,
}

impl std::str::FromStr for IntegratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" | "euler-fixed" => Ok(Self::EulerFixed),
            "adaptive" | "dopri5" => Ok(Self::Adaptive),
            other => Err(Error::Config(format!("unknown integrator `{other}` (euler-fixed, adaptive)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub integrator: IntegratorKind,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub k: usize,
    pub eps_clamp: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorKind::EulerFixed,
            steps: 10,
            rtol: 1e-5,
            atol: 1e-5,
            k: 1,
            eps_clamp: 1e-3,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.k == 0 {
            return Err(Error::Config("sampler needs steps >= 1 and K >= 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("adaptive tolerances must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.eps_clamp) {
            return Err(Error::Config(format!("eps_clamp {} outside [0, 0.5)", self.eps_clamp)));
        }
        Ok(())
    }

    fn policy(&self) -> SingularityPolicy {
        if self.eps_clamp > 0.0 {
            SingularityPolicy::Clamp(self.eps_clamp)
        } else {
            SingularityPolicy::Strict
        }
    }
}

/// Deterministic sub-seed of draw `k` under master seed `seed`.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut x = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Velocity of the latent flow for a fixed conditioning batch.
pub struct LatentVelocity<'a> {
    pub stage2: &'a SecondStage,
    pub cond: &'a ConditioningBatch,
    pub policy: SingularityPolicy,
}

impl VelocityField for LatentVelocity<'_> {
    fn eval(&self, z: &Tensor, tau: f64) -> Result<Tensor> {
        let b = z.dim(0)?;
        let taus = Tensor::from_vec(vec![tau as f32; b], b, z.device())?;
        let o_hat = self.stage2.model().forward(z, &taus, self.cond)?;
        let schedule = self.stage2.config.flow.schedule;
        Ok(velocity_from_data_prediction(z, &o_hat, tau, schedule, self.policy)?.value)
    }
}

/// K forecasts of one observed window plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ForecastSet {
    pub forecasts: Vec<TrajectorySlice>,
    /// Network evaluations per draw.
    pub nfe: Vec<usize>,
    pub seconds: f64,
}

/// JSON manifest written next to sampled forecasts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage1_hash: String,
    pub stage2_hash: String,
    pub sampler: SamplerConfig,
    pub observed_frames: usize,
    pub total_frames: usize,
    pub nfe_per_sample: Vec<usize>,
    pub wall_clock_seconds: f64,
}

fn gaussian(shape: (usize, usize, usize), seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Samples `cfg.k` forecasts of the `total_frames - T_o` frames following `observed`.
pub fn sample_k(
    stage1: &FirstStage,
    stage2: &SecondStage,
    observed: &TrajectorySlice,
    ids: &IdentifierAssignment,
    cfg: &SamplerConfig,
    total_frames: usize,
) -> Result<ForecastSet> {
    cfg.validate()?;
    let started = Instant::now();
    if stage2.stage1_hash != stage1.checksum()? {
        return Err(Error::Incompatible("second stage was trained on a different first stage".into()));
    }
    let (t_o, n, d) = observed.positions.dim();
    if t_o == 0 || t_o >= total_frames {
        return Err(Error::Range {
            what: "observed frames",
            detail: format!("need 1 <= T_o < T, got T_o={t_o}, T={total_frames}"),
        });
    }
    if ids.len() != n {
        return Err(Error::Shape(format!("{} identifiers for {n} entities", ids.len())));
    }
    let pool = stage1.pool().size();
    if n > pool {
        return Err(Error::PoolExhausted { entities: n, pool });
    }
    if let Some(bad) = ids.ids().iter().find(|i| **i >= pool) {
        return Err(Error::IdentifierIndex { id: *bad, rows: pool });
    }
    let frame_ids: Vec<&[usize]> = (0..t_o).map(|_| ids.ids()).collect();
    let props = Array3::from_shape_fn((t_o, n, observed.properties.ncols()), |(_, i, c)| observed.properties[[i, c]]);
    let z_obs = stage2.latent_scale.forward(&stage1.encode(observed.positions.view(), props.view(), &frame_ids)?)?;
    let (_, l, dz) = z_obs.dims3()?;
    let horizon = total_frames - t_o;
    let k = cfg.k;
    let single = crate::approximator::build_conditioning(&z_obs, total_frames)?;
    let policy = cfg.policy();

    let mut finals = Vec::with_capacity(k);
    let mut nfe = Vec::with_capacity(k);
    match cfg.integrator {
        IntegratorKind::EulerFixed => {
            let cond = ConditioningBatch::stack(&vec![single; k])?;
            let z0: Vec<Tensor> = (0..k)
                .map(|j| gaussian((total_frames, l, dz), sub_seed(cfg.seed, j as u64)))
                .collect::<Result<_>>()?;
            let z0 = Tensor::stack(&z0, 0)?;
            let field = LatentVelocity { stage2, cond: &cond, policy };
            let out = integrate_euler(&field, &z0, cfg.steps)?;
            for j in 0..k {
                finals.push(out.z.get(j)?);
                nfe.push(out.nfe);
            }
        }
        IntegratorKind::Adaptive => {
            let cond = ConditioningBatch::stack(&[single])?;
            let field = LatentVelocity { stage2, cond: &cond, policy };
            let opts = AdaptiveOptions {
                rtol: cfg.rtol,
                atol: cfg.atol,
                ..AdaptiveOptions::default()
            };
            for j in 0..k {
                let z0 = gaussian((total_frames, l, dz), sub_seed(cfg.seed, j as u64))?.unsqueeze(0)?;
                let out = integrate_dopri5(&field, &z0, opts)?;
                finals.push(out.z.squeeze(0)?);
                nfe.push(out.nfe);
            }
        }
    }
    let future: Vec<Tensor> = finals
        .iter()
        .map(|z| z.narrow(0, t_o, horizon))
        .collect::<candle_core::Result<_>>()?;
    let future = stage2.latent_scale.inverse(&Tensor::cat(&future, 0)?)?;
    let dec_ids: Vec<&[usize]> = (0..k * horizon).map(|_| ids.ids()).collect();
    let (positions, _) = stage1.decode(&future, &dec_ids)?;
    let forecasts = (0..k)
        .map(|j| TrajectorySlice {
            positions: positions.slice(s![j * horizon..(j + 1) * horizon, .., ..]).to_owned(),
            properties: observed.properties.clone(),
            dt: observed.dt,
            start: observed.start + t_o,
        })
        .collect();
    debug_assert_eq!(positions.dim(), (k * horizon, n, d));
    Ok(ForecastSet {
        forecasts,
        nfe,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// A single forecast; identical to the first draw of [`sample_k`] with the same seed.
pub fn sample_forecast(
    stage1: &FirstStage,
    stage2: &SecondStage,
    observed: &TrajectorySlice,
    ids: &IdentifierAssignment,
    cfg: &SamplerConfig,
    total_frames: usize,
) -> Result<(TrajectorySlice, usize)> {
    let one = SamplerConfig { k: 1, ..cfg.clone() };
    let mut set = sample_k(stage1, stage2, observed, ids, &one, total_frames)?;
    Ok((set.forecasts.remove(0), set.nfe[0]))
}

pub fn manifest(stage1: &FirstStage, stage2: &SecondStage, cfg: &SamplerConfig, observed: usize, total: usize, set: &ForecastSet) -> Result<RunManifest> {
    Ok(RunManifest {
        stage1_hash: stage1.checksum()?,
        stage2_hash: stage2.checksum()?,
        sampler: cfg.clone(),
        observed_frames: observed,
        total_frames: total,
        nfe_per_sample: set.nfe.clone(),
        wall_clock_seconds: set.seconds,
    })
}

/// Chained forecasts, each conditioned on the last frame of the previous block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    /// Frames per block, including the conditioning frame.
    pub block_len: usize,
    pub blocks: usize,
}

impl RolloutPlan {
    pub fn new(block_len: usize, blocks: usize) -> Result<Self> {
        if block_len < 2 || blocks == 0 {
            return Err(Error::Config(format!(
                "rollout needs block length >= 2 and at least one block, got {block_len} x {blocks}"
            )));
        }
        Ok(Self { block_len, blocks })
    }

    /// `1 + blocks * (block_len - 1)`: consecutive blocks share one frame.
    pub fn total_frames(&self) -> usize {
        1 + self.blocks * (self.block_len - 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// First frame of the block within the rollout.
    pub start: usize,
    /// Mean Euclidean error of one encode/decode pass over the conditioning frame.
    pub roundtrip_drift: f64,
    pub nfe: usize,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub blocks: Vec<BlockReport>,
}

/// Generates `plan.total_frames()` frames starting from `initial`.
pub fn cascaded_rollout(
    stage1: &FirstStage,
    stage2: &SecondStage,
    initial: &SystemState,
    dt: f32,
    ids: &IdentifierAssignment,
    plan: RolloutPlan,
    cfg: &SamplerConfig,
) -> Result<Rollout> {
    let plan = RolloutPlan::new(plan.block_len, plan.blocks)?;
    let (n, d) = initial.positions.dim();
    let total = plan.total_frames();
    let mut positions = Array3::<f32>::zeros((total, n, d));
    positions.slice_mut(s![0, .., ..]).assign(&initial.positions);
    let mut reports = Vec::with_capacity(plan.blocks);
    for b in 0..plan.blocks {
        let start = b * (plan.block_len - 1);
        let cond_frame = positions.index_axis(Axis(0), start).to_owned();
        let state = SystemState::new(cond_frame, initial.properties.clone(), initial.frame + start)?;
        let slice = TrajectorySlice::from_state(&state, dt);
        let drift = roundtrip(stage1, &slice, ids).map_err(|e| e.context(format!("rollout block {b}")))?;
        let block_cfg = SamplerConfig {
            seed: sub_seed(cfg.seed, 1_000_000 + b as u64),
            k: 1,
            ..cfg.clone()
        };
        let (forecast, nfe) = sample_forecast(stage1, stage2, &slice, ids, &block_cfg, plan.block_len)
            .map_err(|e| e.context(format!("rollout block {b}")))?;
        if forecast.positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: b }.context(format!("rollout block {b} produced non-finite frames")));
        }
        positions
            .slice_mut(s![start + 1..start + plan.block_len, .., ..])
            .assign(&forecast.positions);
        reports.push(BlockReport {
            block: b,
            start,
            roundtrip_drift: drift,
            nfe,
        });
    }
    let trajectory = Trajectory::new(positions, initial.properties.clone(), dt, TrajectoryMeta::default())?;
    Ok(Rollout {
        trajectory,
        blocks: reports,
    })
}

fn roundtrip(stage1: &FirstStage, slice: &TrajectorySlice, ids: &IdentifierAssignment) -> Result<f64> {
    let (t, n, _) = slice.positions.dim();
    let props = Array3::from_shape_fn((t, n, slice.properties.ncols()), |(_, i, c)| slice.properties[[i, c]]);
    let refs: Vec<&[usize]> = (0..t).map(|_| ids.ids()).collect();
    let z = stage1.encode(slice.positions.view(), props.view(), &refs)?;
    let (x, _) = stage1.decode(&z, &refs)?;
    reconstruction_error(slice.positions.view(), x.view())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_arithmetic() {
        assert_eq!(RolloutPlan::new(30, 3).unwrap().total_frames(), 88);
        assert_eq!(RolloutPlan::new(30, 1).unwrap().total_frames(), 30);
        assert_eq!(RolloutPlan::new(2, 5).unwrap().total_frames(), 6);
        assert!(RolloutPlan::new(1, 3).is_err());
        assert!(RolloutPlan::new(5, 0).is_err());
    }

    #[test]
    fn sub_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|k| sub_seed(7, k)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(sub_seed(1, 0), sub_seed(2, 0));
    }

    #[test]
    fn integrator_names() {
        assert_eq!("euler".parse::<IntegratorKind>().unwrap(), IntegratorKind::EulerFixed);
        assert_eq!("dopri5".parse::<IntegratorKind>().unwrap(), IntegratorKind::Adaptive);
        assert!("rk4".parse::<IntegratorKind>().unwrap_err().is_usage());
    }
}

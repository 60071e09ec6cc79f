use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{ConditioningBatch, LatentFlowConfig, LatentFlowModel};
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::first_stage::{loss_interdist, loss_pos, EpochRecord, FirstStage};
use crate::identifiers::sample_assignment;
use crate::interpolants::interpolate_batch;
use crate::nbody::TrajectoryDataset;
use crate::nn::{checksum_tensors, clip_grad_norm, cosine_lr, load_tensors, mse, save_tensors, scalar, ParamStore};
use crate::types::RigidMotion;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const SIDECAR_FILE: &str = "config.json";
pub const CURVE_FILE: &str = "curve.csv";
const STAGE2_FORMAT: &str = "entity-flow/stage2";
const VAL_SEED: u64 = 0x5eed_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondStageTraining {
    pub epochs: usize,
    /// Trajectory windows per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Window length `T` in frames.
    pub frames: usize,
    /// Candidate observed-frame counts `T_o`, drawn uniformly per step.
    pub cond_frames: Vec<usize>,
    pub rotate: bool,
    pub use_ema: bool,
    /// Standardize every latent coordinate with train-split statistics before the flow sees it.
    pub standardize_latents: bool,
    pub notes: Vec<String>,
}

impl Default for SecondStageTraining {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            lr: 1e-3,
            lr_min: 1e-7,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            ema_decay: 0.999,
            seed: 0,
            frames: 30,
            cond_frames: vec![10],
            rotate: true,
            use_ema: true,
            standardize_latents: true,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondStageConfig {
    pub flow: LatentFlowConfig,
    pub training: SecondStageTraining,
}

impl SecondStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let t = &self.training;
        if t.batch_size == 0 || t.frames < 2 {
            return Err(Error::Config("batch_size must be positive and frames >= 2".into()));
        }
        if t.cond_frames.is_empty() || t.cond_frames.iter().any(|c| *c == 0 || *c >= t.frames) {
            return Err(Error::Config(format!(
                "cond_frames {:?} must be non-empty and within 1..{}",
                t.cond_frames, t.frames
            )));
        }
        if !(t.lr > 0.0) || t.lr_min < 0.0 || t.lr_min > t.lr {
            return Err(Error::Config(format!("invalid learning rates {} / {}", t.lr, t.lr_min)));
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", t.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Sidecar {
    pub format: String,
    pub config: SecondStageConfig,
    /// Checksum of the frozen first-stage weights this model was trained on.
    pub stage1_hash: String,
    pub stage1_dir: Option<String>,
    pub num_latents: usize,
    pub latent_dim: usize,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub weights_checksum: String,
    pub ema_checksum: String,
    pub latent_scale: LatentScale,
}

/// Per-coordinate affine map between encoder latents and the flow's working space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentScale {
    /// Row-major `(L, D_z)`.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentScale {
    const MIN_STD: f32 = 1e-4;

    pub fn identity(num_latents: usize, latent_dim: usize) -> Self {
        Self {
            mean: vec![0.0; num_latents * latent_dim],
            std: vec![1.0; num_latents * latent_dim],
        }
    }

    /// Mean and population std of every coordinate of `z: (..., L, D_z)`.
    pub fn fit(z: &Tensor) -> Result<Self> {
        let dims = z.dims();
        if dims.len() < 2 {
            return Err(Error::Shape(format!("latent statistics need (..., L, D_z), got {dims:?}")));
        }
        let width = dims[dims.len() - 2] * dims[dims.len() - 1];
        let flat = z.to_dtype(DType::F64)?.reshape(((), width))?;
        let mean = flat.mean(0)?;
        let var = flat.broadcast_sub(&mean)?.sqr()?.mean(0)?;
        let mean: Vec<f64> = mean.to_vec1()?;
        let var: Vec<f64> = var.to_vec1()?;
        Ok(Self {
            mean: mean.iter().map(|v| *v as f32).collect(),
            std: var.iter().map(|v| (v.sqrt() as f32).max(Self::MIN_STD)).collect(),
        })
    }

    fn tensors(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (l, d) = (z.dim(z.rank() - 2)?, z.dim(z.rank() - 1)?);
        if l * d != self.mean.len() {
            return Err(Error::Shape(format!("latent scale holds {} coordinates, got {l}x{d}", self.mean.len())));
        }
        let mean = Tensor::from_slice(&self.mean, (l, d), z.device())?.to_dtype(z.dtype())?;
        let std = Tensor::from_slice(&self.std, (l, d), z.device())?.to_dtype(z.dtype())?;
        Ok((mean, std))
    }

    /// Encoder latents to flow space.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (mean, std) = self.tensors(z)?;
        Ok(z.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Flow space back to encoder latents.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let (mean, std) = self.tensors(z)?;
        Ok(z.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }
}

/// A latent flow model bound to the first stage it was trained against.
pub struct SecondStage {
    pub config: SecondStageConfig,
    pub stage1_hash: String,
    pub latent_scale: LatentScale,
    store: ParamStore,
    model: LatentFlowModel,
}

impl SecondStage {
    pub fn new(config: &SecondStageConfig, stage1: &FirstStage) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.training.seed.wrapping_add(1), DType::F32, Device::Cpu);
        let (l, d) = (stage1.model().num_latents(), stage1.model().latent_dim());
        let model = LatentFlowModel::new(&mut store, &config.flow, l, d)?;
        Ok(Self {
            config: config.clone(),
            stage1_hash: stage1.checksum()?,
            latent_scale: LatentScale::identity(l, d),
            store,
            model,
        })
    }

    pub fn model(&self) -> &LatentFlowModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn save_checkpoint(&self, dir: &Path, ema: &EmaState, stage1_dir: Option<&Path>, epochs: usize, steps: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        save_tensors(&ema.shadow, &dir.join(EMA_FILE))?;
        let sidecar = Stage2Sidecar {
            format: STAGE2_FORMAT.into(),
            config: self.config.clone(),
            stage1_hash: self.stage1_hash.clone(),
            stage1_dir: stage1_dir.map(|p| p.display().to_string()),
            num_latents: self.model.num_latents,
            latent_dim: self.model.latent_dim,
            epochs_done: epochs,
            steps_done: steps,
            weights_checksum: self.store.checksum()?,
            ema_checksum: checksum_tensors(&ema.shadow)?,
            latent_scale: self.latent_scale.clone(),
        };
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_sidecar(dir: &Path) -> Result<Stage2Sidecar> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Stage2Sidecar = serde_json::from_str(&text)?;
        if sidecar.format != STAGE2_FORMAT {
            return Err(Error::Incompatible(format!(
                "{} is not a stage-2 checkpoint (format `{}`)",
                dir.display(),
                sidecar.format
            )));
        }
        Ok(sidecar)
    }

    /// Loads a stage-2 checkpoint; `stage1` must be the exact first stage it was trained on.
    pub fn load(dir: &Path, stage1: &FirstStage, use_ema: Option<bool>) -> Result<Self> {
        let sidecar = Self::read_sidecar(dir)?;
        let hash = stage1.checksum()?;
        if hash != sidecar.stage1_hash {
            return Err(Error::Incompatible(format!(
                "stage-2 checkpoint was trained on first stage {}, got {}",
                &sidecar.stage1_hash[..12.min(sidecar.stage1_hash.len())],
                &hash[..12]
            )));
        }
        let mut stage = Self::new(&sidecar.config, stage1)?;
        stage.stage1_hash = sidecar.stage1_hash;
        if sidecar.latent_scale.mean.len() != stage.latent_scale.mean.len() {
            return Err(Error::Incompatible("latent scale does not match the first-stage latent shape".into()));
        }
        stage.latent_scale = sidecar.latent_scale;
        let file = if use_ema.unwrap_or(sidecar.config.training.use_ema) { EMA_FILE } else { WEIGHTS_FILE };
        stage.store.assign(&load_tensors(&dir.join(file), &Device::Cpu)?)?;
        Ok(stage)
    }
}

/// Parameter checksums of the frozen first stage around a second-stage run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeReport {
    pub before: String,
    pub after: String,
}

impl FreezeReport {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, Default)]
pub struct SecondStageOptions {
    pub out_dir: Option<PathBuf>,
    /// Recorded in the sidecar so that the pair can be reloaded.
    pub stage1_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Frozen-encoder latents of random windows, in normalized, optionally rotated coordinates.
pub(crate) struct WindowBatch {
    /// `(B, T, L, D_z)`
    pub z1: Tensor,
    /// `(B * T, N, D_x)` normalized positions.
    pub x: Tensor,
    /// `(B * T, N, D_u)` identifier embeddings.
    pub u: Tensor,
}

pub(crate) fn encode_windows<R: Rng + ?Sized>(
    stage1: &FirstStage,
    ds: &TrajectoryDataset,
    picks: &[usize],
    frames: usize,
    rotate: bool,
    rng: &mut R,
) -> Result<WindowBatch> {
    let n = ds.num_entities();
    let d = ds.spatial_dim();
    let p = ds.property_dim();
    let b = picks.len();
    let pool = stage1.pool();
    let mut x = Array3::<f32>::zeros((b * frames, n, d));
    let mut m = Array3::<f32>::zeros((b * frames, n, p));
    let mut ids: Vec<Vec<usize>> = Vec::with_capacity(b * frames);
    for (k, &ti) in picks.iter().enumerate() {
        let traj = &ds.trajectories[ti];
        let total = traj.num_frames();
        if total < frames {
            return Err(Error::Config(format!("trajectory has {total} frames, window needs {frames}")));
        }
        let start = if total > frames { rng.random_range(0..=total - frames) } else { 0 };
        let assignment = sample_assignment(n, pool, rng)?;
        let motion = if rotate { Some(RigidMotion::sample(d, 0.0, rng)?) } else { None };
        let mut props = traj.properties.clone();
        if p > 0 {
            stage1.normalizer.properties_forward(props.as_slice_mut().expect("standard layout"));
        }
        for f in 0..frames {
            let mut pts = traj.positions.slice(s![start + f, .., ..]).to_owned();
            stage1.normalizer.positions_forward(pts.as_slice_mut().expect("standard layout"));
            if let Some(mo) = &motion {
                mo.apply_points(&mut pts);
            }
            x.slice_mut(s![k * frames + f, .., ..]).assign(&pts);
            m.slice_mut(s![k * frames + f, .., ..]).assign(&props);
            ids.push(assignment.ids().to_vec());
        }
    }
    let dev = Device::Cpu;
    let refs: Vec<&[usize]> = ids.iter().map(|v| v.as_slice()).collect();
    let u = stage1.model().embed_ids(&refs)?.detach();
    let x = Tensor::from_vec(x.into_raw_vec_and_offset().0, (b * frames, n, d), &dev)?;
    let m = Tensor::from_vec(m.into_raw_vec_and_offset().0, (b * frames, n, p), &dev)?;
    let z = stage1.model().encode(&x, &m, &u)?.detach();
    let (_, l, dz) = z.dims3()?;
    Ok(WindowBatch {
        z1: z.reshape((b, frames, l, dz))?,
        x,
        u,
    })
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let v: Vec<f32> = (0..count).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Stage-2 loss on one batch: `MSE(o_hat, z1)` plus decoded auxiliary terms.
fn flow_loss<R: Rng + ?Sized>(
    stage2: &SecondStage,
    stage1: &FirstStage,
    batch: &WindowBatch,
    observed: usize,
    rng: &mut R,
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let cfg = &stage2.config.flow;
    let z1 = stage2.latent_scale.forward(&batch.z1)?;
    let (b, t, l, d) = z1.dims4()?;
    let taus: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let eps = gaussian(&[b, t, l, d], rng)?;
    let z_tau = interpolate_batch(&z1, &eps, &taus, cfg.schedule)?;
    let cond = ConditioningBatch::from_prefix(&z1, observed)?;
    let tau_t = Tensor::from_vec(taus.iter().map(|v| *v as f32).collect::<Vec<_>>(), b, &Device::Cpu)?;
    let o_hat = stage2.model.forward(&z_tau, &tau_t, &cond)?;
    let main = mse(&o_hat, &z1)?;
    let mut parts = BTreeMap::new();
    parts.insert("latent_mse".to_string(), scalar(&main)?);
    let mut total = main;
    if cfg.aux_pos > 0.0 || cfg.aux_interdist > 0.0 {
        let z_hat = stage2.latent_scale.inverse(&o_hat)?;
        let x_hat = stage1.decode_positions_normalized(&z_hat.reshape((b * t, l, d))?, &batch.u)?;
        if cfg.aux_pos > 0.0 {
            let lp = loss_pos(&batch.x, &x_hat)?;
            parts.insert("aux_pos".to_string(), scalar(&lp)?);
            total = (total + (lp * cfg.aux_pos)?)?;
        }
        if cfg.aux_interdist > 0.0 && batch.x.dim(1)? > 1 {
            let li = loss_interdist(&batch.x, &x_hat)?;
            parts.insert("aux_interdist".to_string(), scalar(&li)?);
            total = (total + (li * cfg.aux_interdist)?)?;
        }
    }
    parts.insert("total".to_string(), scalar(&total)?);
    Ok((total, parts))
}

/// Mean stage-2 loss over `ds` with fixed identifiers, windows, times and noise.
pub fn second_stage_validation_loss(stage2: &SecondStage, stage1: &FirstStage, ds: &TrajectoryDataset) -> Result<f64> {
    let t = &stage2.config.training;
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(t.batch_size.max(1)) {
        let batch = encode_windows(stage1, ds, chunk, t.frames, false, &mut rng)?;
        let (loss, _) = flow_loss(stage2, stage1, &batch, t.cond_frames[0], &mut rng)?;
        sum += scalar(&loss)? * chunk.len() as f64;
    }
    Ok(sum / ds.len() as f64)
}

/// Latent statistics over one unrotated window per training trajectory.
fn fit_latent_scale(stage1: &FirstStage, train: &TrajectoryDataset, frames: usize) -> Result<LatentScale> {
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED ^ 0x5ca1e);
    let idx: Vec<usize> = (0..train.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(64) {
        let batch = encode_windows(stage1, train, chunk, frames, false, &mut rng)?;
        let (b, t, l, d) = batch.z1.dims4()?;
        parts.push(batch.z1.reshape((b * t, l, d))?);
    }
    LatentScale::fit(&Tensor::cat(&parts, 0)?)
}

/// Trains the latent flow model on frozen first-stage latents.
pub fn train_second_stage(
    stage1: &FirstStage,
    train: &TrajectoryDataset,
    val: Option<&TrajectoryDataset>,
    config: &SecondStageConfig,
    opts: &SecondStageOptions,
) -> Result<(SecondStage, Vec<EpochRecord>, FreezeReport)> {
    config.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if train.num_entities() > stage1.pool().size() {
        return Err(Error::PoolExhausted {
            entities: train.num_entities(),
            pool: stage1.pool().size(),
        });
    }
    if stage1.data().spatial_dim != train.spatial_dim() || stage1.data().properties != train.properties {
        return Err(Error::Incompatible("dataset layout differs from the first stage".into()));
    }
    let t = &config.training;
    if config.training.rotate && !matches!(train.spatial_dim(), 2 | 3) {
        return Err(Error::UnsupportedDimension(train.spatial_dim()));
    }
    let before = stage1.checksum()?;
    let mut stage2 = SecondStage::new(config, stage1)?;
    if t.standardize_latents {
        stage2.latent_scale = fit_latent_scale(stage1, train, t.frames)?;
    }
    let vars = stage2.store.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut ema = EmaState::from_store(t.ema_decay, &stage2.store)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = order.len().div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * t.epochs;
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_mul(0xA24B_AED4).wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = t.lr;
        for chunk in order.chunks(t.batch_size) {
            lr = cosine_lr(step, total_steps, t.lr, t.lr_min);
            opt.set_learning_rate(lr);
            let batch = encode_windows(stage1, train, chunk, t.frames, t.rotate, &mut rng)?;
            let observed = t.cond_frames[rng.random_range(0..t.cond_frames.len())];
            let (loss, parts) = flow_loss(&stage2, stage1, &batch, observed, &mut rng)?;
            let value = parts["total"];
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let mut grads = loss.backward()?;
            clip_grad_norm(&mut grads, &vars, t.grad_clip)?;
            opt.step(&grads)?;
            ema.update_from_store(&stage2.store)?;
            loss_sum += value * chunk.len() as f64;
            step += 1;
        }
        let val_loss = match val {
            Some(v) => {
                let live = stage2.store.snapshot()?;
                if t.use_ema {
                    stage2.store.assign(&ema.shadow)?;
                }
                let out = second_stage_validation_loss(&stage2, stage1, v);
                stage2.store.assign(&live)?;
                Some(out?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: step,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "stage2 epoch {:>4} train {:.6} val {} lr {:.2e} ({:.1}s)",
                record.epoch,
                record.train_loss,
                record.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                record.lr,
                record.seconds
            );
        }
        curve.push(record);
        if let Some(dir) = &opts.out_dir {
            stage2.save_checkpoint(dir, &ema, opts.stage1_dir.as_deref(), epoch + 1, step)?;
            crate::first_stage::write_curve(&dir.join(CURVE_FILE), &curve)?;
        }
    }
    if let (Some(dir), true) = (&opts.out_dir, curve.is_empty()) {
        stage2.save_checkpoint(dir, &ema, opts.stage1_dir.as_deref(), 0, 0)?;
    }
    if t.use_ema {
        stage2.store.assign(&ema.shadow)?;
    }
    let after = stage1.checksum()?;
    let freeze = FreezeReport { before, after };
    if !freeze.unchanged() {
        return Err(Error::Validation("first-stage parameters changed during second-stage training".into()));
    }
    Ok((stage2, curve, freeze))
}

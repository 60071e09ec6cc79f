use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{loss_ce, loss_interdist, loss_pos, reconstruction_error};
use super::{FirstStage, FirstStageConfig, WeightSet, CURVE_FILE};
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::identifiers::{sample_assignment, IdentifierPool};
use crate::nbody::{PropertyKind, TrajectoryDataset};
use crate::nn::{clip_grad_norm, cosine_lr, mse, scalar};
use crate::types::RigidMotion;

const VAL_ASSIGNMENT_SEED: u64 = 0x5eed_0001;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint directory, rewritten after every epoch.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir` if one exists.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    const HEADER: &'static str = "epoch,steps,train_loss,val_loss,lr,seconds";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.steps,
            self.train_loss,
            self.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            self.lr,
            self.seconds
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            steps: f[1].parse().ok()?,
            train_loss: f[2].parse().ok()?,
            val_loss: if f[3].is_empty() { None } else { f[3].parse().ok() },
            lr: f[4].parse().ok()?,
            seconds: f[5].parse().ok()?,
        })
    }
}

pub(crate) fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(EpochRecord::HEADER);
    text.push('\n');
    for r in curve {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_curve(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            EpochRecord::parse(l).ok_or_else(|| Error::Load {
                field: "curve".into(),
                detail: format!("malformed row `{l}`"),
            })
        })
        .collect()
}

/// Normalized tensors and targets for one batch of frames.
struct FrameBatch {
    x: Tensor,
    m: Tensor,
    u: Tensor,
    continuous: Option<Tensor>,
    categorical: Vec<(usize, Tensor)>,
}

/// Assembles a batch from `(trajectory, frame)` pairs and per-frame identifiers.
fn build_batch(
    stage: &FirstStage,
    ds: &TrajectoryDataset,
    frames: &[(usize, usize)],
    ids: &[Vec<usize>],
    motions: Option<&[RigidMotion]>,
) -> Result<FrameBatch> {
    let n = ds.num_entities();
    let d = ds.spatial_dim();
    let p = ds.property_dim();
    let b = frames.len();
    let mut x = Array3::<f32>::zeros((b, n, d));
    let mut m = Array3::<f32>::zeros((b, n, p));
    for (k, &(t, f)) in frames.iter().enumerate() {
        let traj = &ds.trajectories[t];
        let mut pts = traj.positions.slice(s![f, .., ..]).to_owned();
        stage.normalizer.positions_forward(pts.as_slice_mut().expect("standard layout"));
        if let Some(ms) = motions {
            ms[k].apply_points(&mut pts);
        }
        x.slice_mut(s![k, .., ..]).assign(&pts);
        m.slice_mut(s![k, .., ..]).assign(&traj.properties);
    }
    let mut m_raw = m.clone();
    if p > 0 {
        stage.normalizer.properties_forward(m.as_slice_mut().expect("standard layout"));
    }
    let dev = Device::Cpu;
    let continuous_cols: Vec<usize> = ds
        .properties
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, PropertyKind::Continuous { .. }))
        .map(|(i, _)| i)
        .collect();
    let continuous = if continuous_cols.is_empty() {
        None
    } else {
        let vals: Vec<f32> = m
            .outer_iter()
            .flat_map(|frame| {
                let cols = &continuous_cols;
                frame
                    .outer_iter()
                    .flat_map(|row| cols.iter().map(|&c| row[c]).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect();
        Some(Tensor::from_vec(vals, (b, n, continuous_cols.len()), &dev)?)
    };
    let mut categorical = Vec::new();
    for (col, kind) in ds.properties.iter().enumerate() {
        if let PropertyKind::Categorical { classes, .. } = kind {
            let k = classes.len();
            let mut hot = vec![0f32; b * n * k];
            for (r, v) in m_raw.slice_mut(s![.., .., col]).iter().enumerate() {
                let c = nearest_class(classes, *v);
                hot[r * k + c] = 1.0;
            }
            categorical.push((col, Tensor::from_vec(hot, (b, n, k), &dev)?));
        }
    }
    let id_refs: Vec<&[usize]> = ids.iter().map(|v| v.as_slice()).collect();
    Ok(FrameBatch {
        x: Tensor::from_vec(x.into_raw_vec_and_offset().0, (b, n, d), &dev)?,
        m: Tensor::from_vec(m.into_raw_vec_and_offset().0, (b, n, p), &dev)?,
        u: stage.model().embed_ids(&id_refs)?,
        continuous,
        categorical,
    })
}

fn nearest_class(classes: &[f32], v: f32) -> usize {
    classes
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Weighted reconstruction loss and its parts for one batch.
fn batch_loss(stage: &FirstStage, batch: &FrameBatch) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let w = &stage.config.loss;
    let model = stage.model();
    let z = model.encode(&batch.x, &batch.m, &batch.u)?;
    let out = model.decode(&z, &batch.u)?;
    let mut parts = BTreeMap::new();
    let pos = loss_pos(&batch.x, &out.positions)?;
    parts.insert("pos".to_string(), scalar(&pos)?);
    let mut total = (pos * w.pos)?;
    if batch.x.dim(1)? > 1 && w.interdist > 0.0 {
        let int = loss_interdist(&batch.x, &out.positions)?;
        parts.insert("interdist".to_string(), scalar(&int)?);
        total = (total + (int * w.interdist)?)?;
    }
    if let (Some(pred), Some(target)) = (&out.continuous, &batch.continuous) {
        let l = mse(pred, target)?;
        parts.insert("properties".to_string(), scalar(&l)?);
        total = (total + (l * w.properties)?)?;
    }
    for (col, logits) in &out.logits {
        if let Some((_, target)) = batch.categorical.iter().find(|(c, _)| c == col) {
            let l = loss_ce(logits, target)?;
            parts.insert(format!("ce{col}"), scalar(&l)?);
            total = (total + (l * w.ce)?)?;
        }
    }
    parts.insert("total".to_string(), scalar(&total)?);
    Ok((total, parts))
}

fn all_frames(ds: &TrajectoryDataset) -> Vec<(usize, usize)> {
    (0..ds.len())
        .flat_map(|t| (0..ds.trajectories[t].num_frames()).map(move |f| (t, f)))
        .collect()
}

fn check_pool(stage: &FirstStage, ds: &TrajectoryDataset) -> Result<IdentifierPool> {
    let pool = stage.pool();
    if ds.num_entities() > pool.size() {
        return Err(Error::PoolExhausted {
            entities: ds.num_entities(),
            pool: pool.size(),
        });
    }
    Ok(pool)
}

/// Mean weighted loss over every frame of `ds`, one fixed assignment per trajectory.
pub fn validation_loss(stage: &FirstStage, ds: &TrajectoryDataset) -> Result<f64> {
    let pool = check_pool(stage, ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_ASSIGNMENT_SEED);
    let per_traj: Vec<Vec<usize>> = (0..ds.len())
        .map(|_| sample_assignment(ds.num_entities(), pool, &mut rng).map(|a| a.ids().to_vec()))
        .collect::<Result<_>>()?;
    let frames = all_frames(ds);
    let mut sum = 0.0;
    for chunk in frames.chunks(EVAL_CHUNK) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|(t, _)| per_traj[*t].clone()).collect();
        let batch = build_batch(stage, ds, chunk, &ids, None)?;
        let (loss, _) = batch_loss(stage, &batch)?;
        sum += scalar(&loss)? * chunk.len() as f64;
    }
    Ok(sum / frames.len() as f64)
}

impl FirstStage {
    /// Validation loss with a fixed assignment seed; see [`validation_loss`].
    pub fn validation_loss(&self, ds: &TrajectoryDataset) -> Result<f64> {
        validation_loss(self, ds)
    }
}

/// Trains the autoencoder on every frame of `train`, resampling identifier
/// assignments (and, if configured, rigid motions) for every frame of every step.
pub fn train_first_stage(
    train: &TrajectoryDataset,
    val: Option<&TrajectoryDataset>,
    config: &FirstStageConfig,
    opts: &TrainOptions,
) -> Result<(FirstStage, Vec<EpochRecord>)> {
    config.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let resume_dir = opts
        .out_dir
        .as_ref()
        .filter(|d| opts.resume && d.join(super::SIDECAR_FILE).exists());
    let (stage, mut ema, mut curve, start_epoch, mut step) = match resume_dir {
        Some(dir) => {
            let sidecar = FirstStage::read_sidecar(dir)?;
            let mut expected = sidecar.config.clone();
            expected.training.epochs = config.training.epochs;
            if &expected != config {
                return Err(Error::Incompatible(
                    "resume requested with a configuration that differs from the checkpoint".into(),
                ));
            }
            let mut stage = FirstStage::load(dir, WeightSet::Live)?;
            stage.config = config.clone();
            let ema = FirstStage::load_ema(dir, config.training.ema_decay)?;
            let curve = read_curve(&dir.join(CURVE_FILE))?;
            (stage, ema, curve, sidecar.epochs_done, sidecar.steps_done)
        }
        None => {
            let stage = FirstStage::for_dataset(config, train)?;
            let ema = EmaState::from_store(config.training.ema_decay, stage.store())?;
            (stage, ema, Vec::new(), 0, 0)
        }
    };
    let pool = check_pool(&stage, train)?;
    if let Some(v) = val {
        check_pool(&stage, v)?;
    }
    let t = &config.training;
    let dim = train.spatial_dim();
    let rotate = t.rotate || t.translate > 0.0;
    if rotate && !matches!(dim, 2 | 3) {
        return Err(Error::UnsupportedDimension(dim));
    }

    let vars = stage.store().vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut frames = all_frames(train);
    let steps_per_epoch = frames.len().div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * t.epochs;

    for epoch in start_epoch..t.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64 + 1));
        frames.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = t.lr;
        for chunk in frames.chunks(t.batch_size) {
            lr = cosine_lr(step, total_steps, t.lr, t.lr_min);
            opt.set_learning_rate(lr);
            let ids: Vec<Vec<usize>> = chunk
                .iter()
                .map(|_| sample_assignment(train.num_entities(), pool, &mut rng).map(|a| a.ids().to_vec()))
                .collect::<Result<_>>()?;
            let motions: Option<Vec<RigidMotion>> = if rotate {
                Some(
                    chunk
                        .iter()
                        .map(|_| {
                            let mut m = RigidMotion::sample(dim, t.translate, &mut rng)?;
                            if !t.rotate {
                                m.rotation = ndarray::Array2::eye(dim);
                            }
                            Ok(m)
                        })
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let batch = build_batch(&stage, train, chunk, &ids, motions.as_deref())?;
            let (loss, parts) = batch_loss(&stage, &batch)?;
            let value = parts["total"];
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let mut grads = loss.backward()?;
            clip_grad_norm(&mut grads, &vars, t.grad_clip)?;
            opt.step(&grads)?;
            ema.update_from_store(stage.store())?;
            loss_sum += value * chunk.len() as f64;
            step += 1;
        }
        let val_loss = match val {
            Some(v) => Some(with_weights(&stage, &ema, t.use_ema, || validation_loss(&stage, v))?),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: step,
            train_loss: loss_sum / frames.len() as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "stage1 epoch {:>4} train {:.6} val {} lr {:.2e} ({:.1}s)",
                record.epoch,
                record.train_loss,
                record.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                record.lr,
                record.seconds
            );
        }
        curve.push(record);
        if let Some(dir) = &opts.out_dir {
            stage.save_checkpoint(dir, &ema, epoch + 1, step)?;
            write_curve(&dir.join(CURVE_FILE), &curve)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        if curve.is_empty() {
            stage.save_checkpoint(dir, &ema, 0, step)?;
            write_curve(&dir.join(CURVE_FILE), &curve)?;
        }
    }
    if t.use_ema {
        stage.assign(&ema.shadow)?;
    }
    Ok((stage, curve))
}

/// Runs `f` with the EMA weights swapped in when `use_ema` is set.
fn with_weights<T>(stage: &FirstStage, ema: &EmaState, use_ema: bool, f: impl FnOnce() -> Result<T>) -> Result<T> {
    if !use_ema {
        return f();
    }
    let live = stage.store().snapshot()?;
    stage.assign(&ema.shadow)?;
    let out = f();
    stage.assign(&live)?;
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean Euclidean position error per entity-frame, in scene units.
    pub mean_position_error: f64,
    /// Pooled standard deviation of the dataset's coordinates.
    pub coordinate_std: f64,
    pub relative_error: f64,
    /// Classification accuracy per categorical property.
    pub accuracy: BTreeMap<String, f64>,
    /// Mean absolute error per continuous property, in raw units.
    pub property_error: BTreeMap<String, f64>,
    /// Unweighted loss terms in normalized units.
    pub losses: BTreeMap<String, f64>,
}

/// Round-trips every frame of `ds` with one random assignment per trajectory.
pub fn evaluate_reconstruction(stage: &FirstStage, ds: &TrajectoryDataset, assignment_seed: u64) -> Result<ReconstructionReport> {
    let pool = check_pool(stage, ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(assignment_seed);
    let n = ds.num_entities();
    let per_traj: Vec<Vec<usize>> = (0..ds.len())
        .map(|_| sample_assignment(n, pool, &mut rng).map(|a| a.ids().to_vec()))
        .collect::<Result<_>>()?;
    let frames = all_frames(ds);
    let mut err_sum = 0.0;
    let mut count = 0usize;
    let mut loss_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut correct: BTreeMap<usize, usize> = BTreeMap::new();
    let mut abs_err: BTreeMap<usize, f64> = BTreeMap::new();
    for chunk in frames.chunks(EVAL_CHUNK) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|(t, _)| per_traj[*t].clone()).collect();
        let id_refs: Vec<&[usize]> = ids.iter().map(|v| v.as_slice()).collect();
        let b = chunk.len();
        let mut pos = Array3::<f32>::zeros((b, n, ds.spatial_dim()));
        let mut props = Array3::<f32>::zeros((b, n, ds.property_dim()));
        for (k, &(t, f)) in chunk.iter().enumerate() {
            pos.slice_mut(s![k, .., ..]).assign(&ds.trajectories[t].positions.slice(s![f, .., ..]));
            props.slice_mut(s![k, .., ..]).assign(&ds.trajectories[t].properties);
        }
        let z = stage.encode(pos.view(), props.view(), &id_refs)?;
        let (x_hat, m_hat) = stage.decode(&z, &id_refs)?;
        err_sum += reconstruction_error(pos.view(), x_hat.view())? * (b * n) as f64;
        count += b * n;
        let batch = build_batch(stage, ds, chunk, &ids, None)?;
        let (_, parts) = batch_loss(stage, &batch)?;
        for (k, v) in parts {
            *loss_sums.entry(k).or_default() += v * b as f64;
        }
        for (col, kind) in ds.properties.iter().enumerate() {
            let truth = props.slice(s![.., .., col]);
            let pred = m_hat.slice(s![.., .., col]);
            match kind {
                PropertyKind::Categorical { .. } => {
                    *correct.entry(col).or_default() += truth.iter().zip(pred.iter()).filter(|(a, b)| a == b).count();
                }
                PropertyKind::Continuous { .. } => {
                    *abs_err.entry(col).or_default() +=
                        truth.iter().zip(pred.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
                }
            }
        }
    }
    let std = ds.coordinate_std();
    let mean = err_sum / count as f64;
    let name = |col: usize| match &ds.properties[col] {
        PropertyKind::Continuous { name } | PropertyKind::Categorical { name, .. } => name.clone(),
    };
    Ok(ReconstructionReport {
        mean_position_error: mean,
        coordinate_std: std,
        relative_error: if std > 0.0 { mean / std } else { f64::INFINITY },
        accuracy: correct.into_iter().map(|(c, k)| (name(c), k as f64 / count as f64)).collect(),
        property_error: abs_err.into_iter().map(|(c, e)| (name(c), e / count as f64)).collect(),
        losses: loss_sums.into_iter().map(|(k, v)| (k, v / frames.len() as f64)).collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub seeds: Vec<u64>,
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over assignment seeds.
    pub std: f64,
    pub coordinate_std: f64,
}

/// Reconstruction error under several independent identifier assignments.
pub fn assignment_robustness(stage: &FirstStage, ds: &TrajectoryDataset, seeds: &[u64]) -> Result<RobustnessReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("robustness needs at least two assignment seeds".into()));
    }
    let errors: Vec<f64> = seeds
        .iter()
        .map(|s| evaluate_reconstruction(stage, ds, *s).map(|r| r.mean_position_error))
        .collect::<Result<_>>()?;
    let k = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / k;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    Ok(RobustnessReport {
        seeds: seeds.to_vec(),
        errors,
        mean,
        std,
        coordinate_std: ds.coordinate_std(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::first_stage::{EncoderConfig, FirstStageTraining};
    use crate::nbody::{generate_dataset, Scenario, ScenarioConfig, SplitCounts};

    fn tiny_data(frames: usize) -> Vec<TrajectoryDataset> {
        let mut cfg = ScenarioConfig::default_for(Scenario::Spring);
        cfg.frames = frames;
        generate_dataset(&cfg, SplitCounts { train: 10, val: 2, test: 2 }, 11).unwrap()
    }

    fn tiny_config(epochs: usize) -> FirstStageConfig {
        FirstStageConfig {
            encoder: EncoderConfig {
                id_dim: 16,
                ..EncoderConfig::default()
            },
            training: FirstStageTraining {
                epochs,
                batch_size: 32,
                use_ema: false,
                rotate: false,
                ..FirstStageTraining::default()
            },
            ..FirstStageConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_toy_set() {
        let data = tiny_data(10);
        let (_, curve) = train_first_stage(&data[0], None, &tiny_config(50), &TrainOptions::default()).unwrap();
        assert_eq!(curve.len(), 50);
        assert!(curve.last().unwrap().train_loss < curve[0].train_loss);
    }

    #[test]
    fn checkpoint_round_trip_preserves_validation_loss() {
        let data = tiny_data(6);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let (stage, curve) = train_first_stage(&data[0], Some(&data[1]), &tiny_config(2), &opts).unwrap();
        let before = stage.validation_loss(&data[1]).unwrap();
        let loaded = FirstStage::load(dir.path(), WeightSet::Live).unwrap();
        let after = loaded.validation_loss(&data[1]).unwrap();
        assert!((before - after).abs() < 1e-6);
        assert_eq!(read_curve(&dir.path().join(CURVE_FILE)).unwrap(), curve);
    }

    #[test]
    fn resume_continues_the_curve() {
        let data = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: true,
            verbose: false,
        };
        train_first_stage(&data[0], None, &tiny_config(2), &opts).unwrap();
        let (_, curve) = train_first_stage(&data[0], None, &tiny_config(3), &opts).unwrap();
        assert_eq!(curve.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        let mut other = tiny_config(3);
        other.training.lr = 5e-4;
        assert!(matches!(
            train_first_stage(&data[0], None, &other, &opts),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn pool_smaller_than_system_is_rejected() {
        let data = tiny_data(4);
        let mut cfg = tiny_config(1);
        cfg.encoder.pool_size = 3;
        let err = train_first_stage(&data[0], None, &cfg, &TrainOptions::default()).err().unwrap();
        assert!(matches!(err, Error::PoolExhausted { entities: 5, pool: 3 }));
    }

    #[test]
    fn report_is_finite() {
        let data = tiny_data(4);
        let (stage, _) = train_first_stage(&data[0], None, &tiny_config(1), &TrainOptions::default()).unwrap();
        let r = evaluate_reconstruction(&stage, &data[2], 0).unwrap();
        assert!(r.mean_position_error.is_finite() && r.mean_position_error >= 0.0);
        assert!(r.property_error.contains_key("mass"));
        let rob = assignment_robustness(&stage, &data[2], &[1, 2, 3]).unwrap();
        assert_eq!(rob.errors.len(), 3);
    }
}

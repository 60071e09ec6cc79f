//! First stage: a per-frame autoencoder from entity sets to `L` latent tokens.

mod losses;
mod model;
mod train;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::identifiers::IdentifierPool;
use crate::nbody::{PropertyKind, TrajectoryDataset};
use crate::nn::{checksum_tensors, load_tensors, ParamStore};

pub use losses::{
    distance_matrix, log_softmax, loss_ce, loss_interdist, loss_pos, one_hot, reconstruction_error,
};
pub use model::{AutoEncoder, DataSpec, DecodedFrames, DecoderConfig, EncoderConfig, LATENT_NORM_EPS};
pub(crate) use train::write_curve;
pub use train::{
    assignment_robustness, evaluate_reconstruction, train_first_stage, EpochRecord, ReconstructionReport,
    RobustnessReport, TrainOptions,
};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const SIDECAR_FILE: &str = "config.json";
pub const CURVE_FILE: &str = "curve.csv";
const STAGE1_FORMAT: &str = "entity-flow/stage1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pos: f64,
    pub interdist: f64,
    /// Weight of the regression loss on continuous properties.
    pub properties: f64,
    /// Weight of the cross-entropy on categorical properties.
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pos: 1.0,
            interdist: 1.0,
            properties: 1.0,
            ce: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstStageTraining {
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Random rotations of every training frame.
    pub rotate: bool,
    /// Half width of random translations, in normalized units.
    pub translate: f64,
    /// Evaluate and export the EMA weights rather than the live ones.
    pub use_ema: bool,
    /// Free-form notes on deviations from the reference configuration.
    pub notes: Vec<String>,
}

impl Default for FirstStageTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            lr_min: 1e-7,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            ema_decay: 0.999,
            seed: 0,
            rotate: true,
            translate: 0.0,
            use_ema: true,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstStageConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub training: FirstStageTraining,
}

impl FirstStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.lr > 0.0) || t.lr_min < 0.0 || t.lr_min > t.lr {
            return Err(Error::Config(format!("invalid learning rates {} / {}", t.lr, t.lr_min)));
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", t.ema_decay)));
        }
        let w = &self.loss;
        if [w.pos, w.interdist, w.properties, w.ce].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(())
    }
}

/// Standardization fitted on the training split: coordinates use a per-axis
/// mean and one pooled scale (so rotations commute with it), continuous
/// properties a per-column mean and scale. Categorical columns pass through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub position_mean: Vec<f64>,
    pub position_std: f64,
    pub property_mean: Vec<f64>,
    pub property_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(spatial_dim: usize, property_dim: usize) -> Self {
        Self {
            position_mean: vec![0.0; spatial_dim],
            position_std: 1.0,
            property_mean: vec![0.0; property_dim],
            property_std: vec![1.0; property_dim],
        }
    }

    pub fn fit(ds: &TrajectoryDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Validation("cannot fit normalization on an empty dataset".into()));
        }
        let d = ds.spatial_dim();
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for t in &ds.trajectories {
            for row in t.positions.rows() {
                for (s, v) in sum.iter_mut().zip(row.iter()) {
                    *s += *v as f64;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = 0.0f64;
        for t in &ds.trajectories {
            for row in t.positions.rows() {
                for (m, v) in mean.iter().zip(row.iter()) {
                    sq += (*v as f64 - m).powi(2);
                }
            }
        }
        let std = (sq / (count * d) as f64).sqrt();
        let p = ds.property_dim();
        let mut property_mean = vec![0.0; p];
        let mut property_std = vec![1.0; p];
        for (c, kind) in ds.properties.iter().enumerate() {
            if let PropertyKind::Continuous { .. } = kind {
                let vals: Vec<f64> = ds
                    .trajectories
                    .iter()
                    .flat_map(|t| t.properties.column(c).to_vec())
                    .map(|v| v as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                property_mean[c] = m;
                property_std[c] = if s > 1e-8 { s } else { 1.0 };
            }
        }
        Ok(Self {
            position_mean: mean,
            position_std: if std > 1e-12 { std } else { 1.0 },
            property_mean,
            property_std,
        })
    }

    /// Normalizes `(..., D_x)` coordinates in place.
    pub fn positions_forward(&self, xs: &mut [f32]) {
        let d = self.position_mean.len();
        for (i, v) in xs.iter_mut().enumerate() {
            *v = ((*v as f64 - self.position_mean[i % d]) / self.position_std) as f32;
        }
    }

    pub fn positions_inverse(&self, xs: &mut [f32]) {
        let d = self.position_mean.len();
        for (i, v) in xs.iter_mut().enumerate() {
            *v = (*v as f64 * self.position_std + self.position_mean[i % d]) as f32;
        }
    }

    pub fn properties_forward(&self, xs: &mut [f32]) {
        let p = self.property_mean.len();
        for (i, v) in xs.iter_mut().enumerate() {
            *v = ((*v as f64 - self.property_mean[i % p]) / self.property_std[i % p]) as f32;
        }
    }

    pub fn properties_inverse_column(&self, column: usize, xs: &mut [f32]) {
        for v in xs.iter_mut() {
            *v = (*v as f64 * self.property_std[column] + self.property_mean[column]) as f32;
        }
    }
}

/// Which set of weights a checkpoint is loaded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSet {
    Live,
    Ema,
    /// Whatever the training configuration selected for evaluation.
    Preferred,
}

/// JSON sidecar stored next to the stage-1 weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Sidecar {
    pub format: String,
    pub config: FirstStageConfig,
    pub data: DataSpec,
    pub normalizer: Normalizer,
    pub pool_size: usize,
    pub seed: u64,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub weights_checksum: String,
    pub ema_checksum: String,
}

/// A (trained or freshly initialized) first-stage model with its normalization.
pub struct FirstStage {
    pub config: FirstStageConfig,
    pub normalizer: Normalizer,
    store: ParamStore,
    model: AutoEncoder,
}

impl FirstStage {
    pub fn new(config: &FirstStageConfig, data: &DataSpec, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        if normalizer.position_mean.len() != data.spatial_dim || normalizer.property_mean.len() != data.properties.len() {
            return Err(Error::Config("normalizer does not match the data layout".into()));
        }
        let mut store = ParamStore::new(config.training.seed, DType::F32, Device::Cpu);
        let model = AutoEncoder::new(&mut store, &config.encoder, &config.decoder, data)?;
        Ok(Self {
            config: config.clone(),
            normalizer,
            store,
            model,
        })
    }

    /// Model and normalization sized for `ds`.
    pub fn for_dataset(config: &FirstStageConfig, ds: &TrajectoryDataset) -> Result<Self> {
        let data = DataSpec {
            spatial_dim: ds.spatial_dim(),
            properties: ds.properties.clone(),
        };
        Self::new(config, &data, Normalizer::fit(ds)?)
    }

    pub fn model(&self) -> &AutoEncoder {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn data(&self) -> &DataSpec {
        &self.model.data
    }

    pub fn pool(&self) -> IdentifierPool {
        self.model.pool()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn sidecar(&self, ema: &EmaState, epochs_done: usize, steps_done: usize) -> Result<Stage1Sidecar> {
        Ok(Stage1Sidecar {
            format: STAGE1_FORMAT.into(),
            config: self.config.clone(),
            data: self.model.data.clone(),
            normalizer: self.normalizer.clone(),
            pool_size: self.config.encoder.pool_size,
            seed: self.config.training.seed,
            epochs_done,
            steps_done,
            weights_checksum: self.store.checksum()?,
            ema_checksum: checksum_tensors(&ema.shadow)?,
        })
    }

    /// Writes live weights, EMA shadow and the sidecar into `dir`.
    pub(crate) fn save_checkpoint(&self, dir: &Path, ema: &EmaState, epochs_done: usize, steps_done: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        crate::nn::save_tensors(&ema.shadow, &dir.join(EMA_FILE))?;
        let sidecar = self.sidecar(ema, epochs_done, steps_done)?;
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read_sidecar(dir: &Path) -> Result<Stage1Sidecar> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Stage1Sidecar = serde_json::from_str(&text)?;
        if sidecar.format != STAGE1_FORMAT {
            return Err(Error::Incompatible(format!(
                "{} is not a stage-1 checkpoint (format `{}`)",
                dir.display(),
                sidecar.format
            )));
        }
        Ok(sidecar)
    }

    /// Loads a checkpoint directory written by [`train_first_stage`].
    pub fn load(dir: &Path, which: WeightSet) -> Result<Self> {
        let sidecar = Self::read_sidecar(dir)?;
        let stage = Self::new(&sidecar.config, &sidecar.data, sidecar.normalizer.clone())?;
        let use_ema = match which {
            WeightSet::Live => false,
            WeightSet::Ema => true,
            WeightSet::Preferred => sidecar.config.training.use_ema,
        };
        let file = if use_ema { EMA_FILE } else { WEIGHTS_FILE };
        stage.store.assign(&load_tensors(&dir.join(file), &Device::Cpu)?)?;
        Ok(stage)
    }

    pub(crate) fn load_ema(dir: &Path, decay: f64) -> Result<EmaState> {
        EmaState::new(decay, load_tensors(&dir.join(EMA_FILE), &Device::Cpu)?)
    }

    pub(crate) fn assign(&self, values: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        self.store.assign(values)
    }

    fn check_batch(&self, positions: &ArrayView3<'_, f32>, properties: &ArrayView3<'_, f32>, ids: &[&[usize]]) -> Result<()> {
        let (b, n, d) = positions.dim();
        if d != self.model.data.spatial_dim {
            return Err(Error::Shape(format!("expected D_x={}, got {d}", self.model.data.spatial_dim)));
        }
        if properties.dim() != (b, n, self.model.data.properties.len()) {
            return Err(Error::Shape(format!("properties {:?} vs positions {:?}", properties.dim(), positions.dim())));
        }
        if ids.len() != b || ids.iter().any(|a| a.len() != n) {
            return Err(Error::Shape(format!("need {b} assignments of length {n}")));
        }
        Ok(())
    }

    /// Normalized input tensors for a batch of raw frames.
    pub fn input_tensors(
        &self,
        positions: ArrayView3<'_, f32>,
        properties: ArrayView3<'_, f32>,
        ids: &[&[usize]],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_batch(&positions, &properties, ids)?;
        let (b, n, d) = positions.dim();
        let mut x: Vec<f32> = positions.iter().copied().collect();
        self.normalizer.positions_forward(&mut x);
        let p = properties.dim().2;
        let mut m: Vec<f32> = properties.iter().copied().collect();
        if p > 0 {
            self.normalizer.properties_forward(&mut m);
        }
        let x = Tensor::from_vec(x, (b, n, d), &Device::Cpu)?;
        let m = Tensor::from_vec(m, (b, n, p), &Device::Cpu)?;
        let u = self.model.embed_ids(ids)?;
        Ok((x, m, u))
    }

    /// Encodes raw frames `(B, N, D_x)` / `(B, N, D_m)` to latents `(B, L, D_z)`.
    pub fn encode(&self, positions: ArrayView3<'_, f32>, properties: ArrayView3<'_, f32>, ids: &[&[usize]]) -> Result<Tensor> {
        let (x, m, u) = self.input_tensors(positions, properties, ids)?;
        Ok(self.model.encode(&x, &m, &u)?.detach())
    }

    /// Decodes latents `(B, L, D_z)` to raw-unit positions and properties.
    pub fn decode(&self, z: &Tensor, ids: &[&[usize]]) -> Result<(Array3<f32>, Array3<f32>)> {
        let u = self.model.embed_ids(ids)?;
        let out = self.model.decode(z, &u)?;
        let (b, n, d) = out.positions.dims3()?;
        let mut pos: Vec<f32> = out.positions.flatten_all()?.to_vec1()?;
        self.normalizer.positions_inverse(&mut pos);
        let positions = Array3::from_shape_vec((b, n, d), pos).map_err(|e| Error::Shape(e.to_string()))?;
        let p = self.model.data.properties.len();
        let mut props = Array3::<f32>::zeros((b, n, p));
        if let Some(cont) = &out.continuous {
            let k = out.continuous_columns.len();
            let vals: Vec<f32> = cont.flatten_all()?.to_vec1()?;
            for (j, &col) in out.continuous_columns.iter().enumerate() {
                let mut column: Vec<f32> = (0..b * n).map(|r| vals[r * k + j]).collect();
                self.normalizer.properties_inverse_column(col, &mut column);
                for (r, v) in column.into_iter().enumerate() {
                    props[[r / n, r % n, col]] = v;
                }
            }
        }
        for (col, logits) in &out.logits {
            let classes = self.model.categorical_classes(*col).expect("head exists");
            let best = logits.argmax(candle_core::D::Minus1)?.flatten_all()?.to_vec1::<u32>()?;
            for (r, c) in best.into_iter().enumerate() {
                props[[r / n, r % n, *col]] = classes[c as usize];
            }
        }
        Ok((positions, props))
    }

    /// Decoded positions in normalized units, differentiable in `z`.
    pub fn decode_positions_normalized(&self, z: &Tensor, ids: &Tensor) -> Result<Tensor> {
        self.model.decode_positions(z, ids)
    }

    /// Normalized ground-truth positions as a tensor.
    pub fn normalized_positions(&self, positions: ArrayView3<'_, f32>) -> Result<Tensor> {
        let dims = positions.dim();
        let mut x: Vec<f32> = positions.iter().copied().collect();
        self.normalizer.positions_forward(&mut x);
        Ok(Tensor::from_vec(x, dims, &Device::Cpu)?)
    }
}

//! Trajectory datasets and their on-disk layout.
//!
//! A split directory holds three files:
//!
//! * `meta.json`: schema version, scenario config, shapes, per-trajectory seeds
//! * `X.bin`: little-endian `f32`, row-major `[num_traj, T, N, D_x]`
//! * `M.bin`: little-endian `f32`, row-major `[num_traj, N, D_m]`

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sim::{simulate, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::types::{Trajectory, TrajectoryMeta};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How each property column is interpreted by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PropertyKind {
    Continuous { name: String },
    /// Values restricted to `classes`; decoded through logits over the classes.
    Categorical { name: String, classes: Vec<f32> },
}

impl PropertyKind {
    pub fn for_scenario(scenario: Scenario) -> Vec<PropertyKind> {
        match scenario {
            Scenario::Charged => vec![PropertyKind::Categorical {
                name: "charge".into(),
                classes: vec![-1.0, 1.0],
            }],
            Scenario::Spring | Scenario::Gravity => {
                vec![PropertyKind::Continuous { name: "mass".into() }]
            }
        }
    }
}

/// Trajectory counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const FULL_SCALE: SplitCounts = SplitCounts {
        train: 3000,
        val: 2000,
        test: 2000,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn is_desk_scale(&self) -> bool {
        self.train < Self::FULL_SCALE.train
            || self.val < Self::FULL_SCALE.val
            || self.test < Self::FULL_SCALE.test
    }
}

impl std::str::FromStr for SplitCounts {
    type Err = Error;

    /// Parses `train,val,test`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(train), Ok(val), Ok(test)] => Ok(Self {
                train: *train,
                val: *val,
                test: *test,
            }),
            _ => Err(Error::Config(format!("counts must look like `500,100,100`, got `{s}`"))),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub split: Split,
    pub scenario: ScenarioConfig,
    pub counts: SplitCounts,
    pub desk_scale: bool,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub units: String,
    /// Physical time between stored frames.
    pub frame_dt: f32,
    pub positions_shape: [usize; 4],
    pub properties_shape: [usize; 3],
    pub properties: Vec<PropertyKind>,
    pub dtype: String,
    pub endianness: String,
}

/// All trajectories of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub split: Split,
    pub config: ScenarioConfig,
    pub trajectories: Vec<Trajectory>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub counts: SplitCounts,
    pub properties: Vec<PropertyKind>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.trajectories[0].num_frames()
    }

    pub fn num_entities(&self) -> usize {
        self.trajectories[0].num_entities()
    }

    pub fn spatial_dim(&self) -> usize {
        self.trajectories[0].spatial_dim()
    }

    pub fn property_dim(&self) -> usize {
        self.trajectories[0].property_dim()
    }

    /// Checks the shapes agree across trajectories.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        let shape = first.positions.dim();
        let pshape = first.properties.dim();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.positions.dim() != shape || t.properties.dim() != pshape {
                return Err(Error::Validation(format!(
                    "trajectory {i} has shape {:?}/{:?}, expected {shape:?}/{pshape:?}",
                    t.positions.dim(),
                    t.properties.dim()
                )));
            }
        }
        Ok(())
    }

    /// Standard deviation of all coordinate values pooled together.
    pub fn coordinate_std(&self) -> f64 {
        let (mut sum, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
        for t in &self.trajectories {
            for v in t.positions.iter() {
                sum += *v as f64;
                sq += (*v as f64).powi(2);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        (sq / count as f64 - mean * mean).max(0.0).sqrt()
    }

    pub fn meta(&self) -> DatasetMeta {
        let t = &self.trajectories[0];
        DatasetMeta {
            schema_version: SCHEMA_VERSION,
            split: self.split,
            scenario: self.config.clone(),
            counts: self.counts,
            desk_scale: self.counts.is_desk_scale(),
            master_seed: self.master_seed,
            seeds: self.seeds.clone(),
            units: "simulation length units".into(),
            frame_dt: t.dt,
            positions_shape: [self.len(), t.num_frames(), t.num_entities(), t.spatial_dim()],
            properties_shape: [self.len(), t.num_entities(), t.property_dim()],
            properties: self.properties.clone(),
            dtype: "f32".into(),
            endianness: "little".into(),
        }
    }
}

/// Draws `total` distinct seeds from `master`.
fn draw_seeds(master: u64, total: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mut seen = std::collections::HashSet::with_capacity(total);
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let s: u64 = rng.random();
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

/// Simulates every split from one master seed. Per-trajectory seeds are
/// distinct across splits and recorded in the manifests.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    counts: SplitCounts,
    master_seed: u64,
) -> Result<Vec<TrajectoryDataset>> {
    cfg.validate()?;
    for split in Split::ALL {
        if counts.get(split) == 0 {
            return Err(Error::Config(format!("split `{}` needs at least one trajectory", split.name())));
        }
    }
    let all = draw_seeds(master_seed, counts.train + counts.val + counts.test);
    let mut offset = 0;
    Split::ALL
        .iter()
        .map(|&split| {
            let seeds = all[offset..offset + counts.get(split)].to_vec();
            offset += counts.get(split);
            let trajectories = seeds
                .par_iter()
                .map(|&seed| simulate(cfg, seed)?.into_trajectory(cfg, seed))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrajectoryDataset {
                split,
                config: cfg.clone(),
                trajectories,
                seeds,
                master_seed,
                counts,
                properties: PropertyKind::for_scenario(cfg.scenario),
            })
        })
        .collect()
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize, field: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Load {
            field: field.into(),
            detail: format!(
                "{} holds {} bytes, metadata shape requires {}",
                path.display(),
                bytes.len(),
                expected * 4
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `meta.json`, `X.bin` and `M.bin` into `dir`.
pub fn save_dataset(ds: &TrajectoryDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&ds.meta())?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    write_f32(
        &dir.join("X.bin"),
        ds.trajectories.iter().flat_map(|t| t.positions.iter().copied()),
    )?;
    write_f32(
        &dir.join("M.bin"),
        ds.trajectories.iter().flat_map(|t| t.properties.iter().copied()),
    )?;
    Ok(())
}

/// Reads a split directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Load {
        field: "meta.json".into(),
        detail: e.to_string(),
    })?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Load {
                field: "schema_version".into(),
                detail: format!("dataset has schema version {v}, this build reads {SCHEMA_VERSION}"),
            })
        }
        None => {
            return Err(Error::Load {
                field: "schema_version".into(),
                detail: "missing".into(),
            })
        }
    }
    let meta: DatasetMeta = serde_json::from_value(raw).map_err(|e| Error::Load {
        field: "meta.json".into(),
        detail: e.to_string(),
    })?;
    if meta.endianness != "little" || meta.dtype != "f32" {
        return Err(Error::Load {
            field: "dtype".into(),
            detail: format!("unsupported storage {} {}", meta.endianness, meta.dtype),
        });
    }
    let [count, t, n, d] = meta.positions_shape;
    let [pcount, pn, dm] = meta.properties_shape;
    if pcount != count || pn != n {
        return Err(Error::Load {
            field: "properties_shape".into(),
            detail: format!("{:?} disagrees with positions {:?}", meta.properties_shape, meta.positions_shape),
        });
    }
    if meta.seeds.len() != count {
        return Err(Error::Load {
            field: "seeds".into(),
            detail: format!("{} seeds for {count} trajectories", meta.seeds.len()),
        });
    }
    let xs = read_f32(&dir.join("X.bin"), count * t * n * d, "positions_shape")?;
    let ms = read_f32(&dir.join("M.bin"), count * n * dm, "properties_shape")?;
    let xs = ndarray::Array::from_shape_vec((count, t, n, d), xs)
        .map_err(|e| Error::Load { field: "positions_shape".into(), detail: e.to_string() })?;
    let ms = Array3::from_shape_vec((count, n, dm), ms)
        .map_err(|e| Error::Load { field: "properties_shape".into(), detail: e.to_string() })?;
    let trajectories = (0..count)
        .map(|i| {
            Trajectory::new(
                xs.index_axis(Axis(0), i).to_owned(),
                Array2::from(ms.index_axis(Axis(0), i).to_owned()),
                meta.frame_dt,
                TrajectoryMeta {
                    scenario: meta.scenario.scenario.name().into(),
                    seed: meta.seeds[i],
                },
            )
            .map_err(|e| e.context(format!("trajectory {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        split: meta.split,
        config: meta.scenario,
        trajectories,
        seeds: meta.seeds,
        master_seed: meta.master_seed,
        counts: meta.counts,
        properties: meta.properties,
    })
}

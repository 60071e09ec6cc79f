//! Golden runs: pinned configurations with expected metric ranges.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::approximator::{train_second_stage, SecondStage, SecondStageOptions};
use crate::config::RunConfig;
use crate::ema::{ema_update, EmaState};
use crate::error::{Error, Result};
use crate::evaluation::{ade, evaluate_model, fde, min_metrics, Evaluation};
use crate::first_stage::{
    assignment_robustness, evaluate_reconstruction, train_first_stage, DataSpec, EncoderConfig, FirstStage,
    FirstStageConfig, Normalizer, TrainOptions, WeightSet,
};
use crate::identifiers::{count_assignments, IdentifierAssignment};
use crate::interpolants::{interpolate, velocity_from_data_prediction, Schedule, SingularityPolicy};
use crate::nbody::{
    generate_dataset, simulate, simulate_from, InitialConditions, PropertyKind, Scenario, ScenarioConfig,
    SplitCounts, TrajectoryDataset,
};
use crate::sampler::{cascaded_rollout, integrate_euler, FnField, RolloutPlan};
use crate::types::SystemState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedRange {
    pub metric: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl ExpectedRange {
    fn contains(&self, v: f64) -> bool {
        v.is_finite() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }

    /// Distance to the nearest bound; zero when inside.
    fn delta(&self, v: f64) -> f64 {
        if !v.is_finite() {
            return f64::INFINITY;
        }
        match (self.min, self.max) {
            (Some(m), _) if v < m => v - m,
            (_, Some(m)) if v > m => v - m,
            _ => 0.0,
        }
    }
}

/// One golden manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenRun {
    pub name: String,
    pub criterion: u32,
    pub description: String,
    pub dataset_seed: u64,
    pub budget_seconds: f64,
    pub config: Value,
    pub config_hash: String,
    pub expected: Vec<ExpectedRange>,
}

macro_rules! golden_files {
    ($($file:literal),* $(,)?) => {
        &[$(($file, include_str!(concat!("../../../goldens/", $file, ".json")))),*]
    };
}

const GOLDENS: &[(&str, &str)] = golden_files!(
    "identifier-counting",
    "interpolant-algebra",
    "velocity-reparam",
    "metric-oracles",
    "encoder-structure",
    "euler-closed-form",
    "spring-stage1-desk",
    "spring-desk",
    "physics-generators",
    "freeze-ema",
    "cascaded-rollout",
);

pub fn golden_names() -> Vec<&'static str> {
    GOLDENS.iter().map(|(n, _)| *n).collect()
}

pub fn golden(name: &str) -> Result<GoldenRun> {
    let (_, text) = GOLDENS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::Config(format!("unknown golden `{name}`; available: {}", golden_names().join(", ")))
    })?;
    let run: GoldenRun = serde_json::from_str(text)?;
    if run.name != name {
        return Err(Error::Validation(format!("golden file `{name}` declares name `{}`", run.name)));
    }
    Ok(run)
}

/// SHA-256 of the compact JSON form (object keys sorted).
pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricCheck {
    pub metric: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenReport {
    pub name: String,
    pub criterion: u32,
    pub passed: bool,
    pub seconds: f64,
    pub budget_seconds: f64,
    pub checks: Vec<MetricCheck>,
    pub notes: Vec<String>,
}

impl GoldenReport {
    pub fn summary_line(&self) -> String {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{}={:.6e} (delta {:+.3e})", c.metric, c.value, c.delta))
            .collect();
        format!(
            "{} [{}] {} in {:.1}s{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.seconds,
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join(", ")) }
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct GoldenOptions {
    /// Cache for datasets and checkpoints of the training goldens.
    pub work_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl GoldenOptions {
    fn work_dir(&self) -> PathBuf {
        self.work_dir
            .clone()
            .unwrap_or_else(|| crate::config::resolve_output(Path::new("golden-work")))
    }
}

type Metrics = BTreeMap<String, f64>;

pub fn run_golden(name: &str, opts: &GoldenOptions) -> Result<GoldenReport> {
    let run = golden(name)?;
    let start = Instant::now();
    let mut notes = Vec::new();
    let hash = config_hash(&run.config);
    if hash != run.config_hash {
        return Err(Error::Validation(format!(
            "golden `{name}`: config hash {hash} does not match the pinned {}",
            run.config_hash
        )));
    }
    let metrics = match name {
        "identifier-counting" => identifier_counting(&run.config)?,
        "interpolant-algebra" => interpolant_algebra(&run.config)?,
        "velocity-reparam" => velocity_reparam(&run.config, run.dataset_seed)?,
        "metric-oracles" => metric_oracles(&run.config, run.dataset_seed)?,
        "encoder-structure" => encoder_structure(&run.config, run.dataset_seed)?,
        "euler-closed-form" => euler_closed_form(&run.config)?,
        "physics-generators" => physics_generators(&run.config, run.dataset_seed)?,
        "freeze-ema" => freeze_ema(&run.config, run.dataset_seed)?,
        "spring-stage1-desk" | "spring-desk" | "cascaded-rollout" => {
            let cfg: RunConfig = serde_json::from_value(run.config.clone())
                .map_err(|e| Error::Config(format!("golden `{name}` config: {e}")))?;
            cfg.validate()?;
            if cfg.seed != run.dataset_seed {
                notes.push(format!("dataset seed {} differs from run seed {}", run.dataset_seed, cfg.seed));
            }
            let dir = opts.work_dir().join(&hash[..16]);
            let pipeline = DeskPipeline::prepare(&cfg, &dir, name != "spring-stage1-desk", opts.verbose)?;
            notes.push(format!("artifacts in {}", dir.display()));
            match name {
                "spring-stage1-desk" => pipeline.stage1_metrics(&cfg)?,
                "spring-desk" => pipeline.forecast_metrics(&cfg)?,
                _ => pipeline.rollout_metrics(&cfg)?,
            }
        }
        other => return Err(Error::Config(format!("golden `{other}` has no runner"))),
    };
    let seconds = start.elapsed().as_secs_f64();
    let mut all = metrics;
    all.insert("seconds".into(), seconds);
    let mut checks = Vec::new();
    for exp in &run.expected {
        let value = *all.get(&exp.metric).ok_or_else(|| {
            Error::Validation(format!("golden `{name}` expects unknown metric `{}`", exp.metric))
        })?;
        checks.push(MetricCheck {
            metric: exp.metric.clone(),
            value,
            min: exp.min,
            max: exp.max,
            delta: exp.delta(value),
            pass: exp.contains(value),
        });
    }
    for (k, v) in &all {
        if !run.expected.iter().any(|e| &e.metric == k) {
            notes.push(format!("{k} = {v}"));
        }
    }
    let passed = checks.iter().all(|c| c.pass) && seconds <= run.budget_seconds;
    if seconds > run.budget_seconds {
        notes.push(format!("runtime {seconds:.1}s exceeds budget {:.0}s", run.budget_seconds));
    }
    Ok(GoldenReport {
        name: run.name,
        criterion: run.criterion,
        passed,
        seconds,
        budget_seconds: run.budget_seconds,
        checks,
        notes,
    })
}

/// Runs every golden in order.
pub fn run_all(opts: &GoldenOptions) -> Result<Vec<GoldenReport>> {
    golden_names().into_iter().map(|n| run_golden(n, opts)).collect()
}

fn param<T: serde::de::DeserializeOwned>(config: &Value, key: &str) -> Result<T> {
    let v = config
        .get(key)
        .ok_or_else(|| Error::Config(format!("golden config lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("golden config `{key}`: {e}")))
}

fn brute_force_injective(n: usize, u: usize) -> u128 {
    fn go(depth: usize, n: usize, used: &mut Vec<bool>) -> u128 {
        if depth == n {
            return 1;
        }
        let mut total = 0;
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                total += go(depth + 1, n, used);
                used[i] = false;
            }
        }
        total
    }
    go(0, n, &mut vec![false; u])
}

fn identifier_counting(config: &Value) -> Result<Metrics> {
    let max_pool: usize = param(config, "max_pool")?;
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for u in 0..=max_pool {
        for n in 0..=u {
            cases += 1;
            if brute_force_injective(n, u) != count_assignments(n, u) {
                mismatches += 1;
            }
        }
    }
    Ok(Metrics::from([
        ("mismatches".into(), mismatches as f64),
        ("cases".into(), cases as f64),
    ]))
}

fn interpolant_algebra(config: &Value) -> Result<Metrics> {
    let grid: usize = param(config, "grid_points")?;
    let mut boundary = 0.0f64;
    for schedule in [Schedule::Linear, Schedule::Gvp] {
        let (a, b) = (schedule.eval(0.0)?, schedule.eval(1.0)?);
        boundary = boundary
            .max(a.alpha.abs())
            .max(b.sigma.abs())
            .max((b.alpha - 1.0).abs())
            .max((a.sigma - 1.0).abs());
    }
    let mut norm = 0.0f64;
    for i in 0..grid {
        let v = Schedule::Gvp.eval(i as f64 / (grid - 1) as f64)?;
        norm = norm.max((v.alpha * v.alpha + v.sigma * v.sigma - 1.0).abs());
    }
    Ok(Metrics::from([
        ("boundary_error".into(), boundary),
        ("gvp_norm_error".into(), norm),
    ]))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn velocity_reparam(config: &Value, seed: u64) -> Result<Metrics> {
    let draws: usize = param(config, "draws")?;
    let shape: Vec<usize> = param(config, "shape")?;
    let range: [f64; 2] = param(config, "tau_range")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut closed = 0.0f64;
    let mut consistency = [0.0f64; 2];
    for _ in 0..draws {
        let tau = rng.random_range(range[0]..=range[1]);
        let o_tau = random_tensor(&mut rng, &shape)?;
        let o_hat = random_tensor(&mut rng, &shape)?;
        let v = velocity_from_data_prediction(&o_tau, &o_hat, tau, Schedule::Linear, SingularityPolicy::Strict)?;
        let expected = ((&o_hat - &o_tau)? / (1.0 - tau))?;
        closed = closed.max(max_abs_diff(&v.value, &expected)?);
        let o1 = random_tensor(&mut rng, &shape)?;
        let eps = random_tensor(&mut rng, &shape)?;
        for (i, schedule) in [Schedule::Linear, Schedule::Gvp].into_iter().enumerate() {
            let sv = schedule.eval(tau)?;
            let o = interpolate(&o1, &eps, tau, schedule)?;
            let v = velocity_from_data_prediction(&o, &o1, tau, schedule, SingularityPolicy::Strict)?;
            let truth = ((&o1 * sv.alpha_dot)? + (&eps * sv.sigma_dot)?)?;
            consistency[i] = consistency[i].max(max_abs_diff(&v.value, &truth)?);
        }
    }
    Ok(Metrics::from([
        ("linear_closed_form_error".into(), closed),
        ("linear_consistency_error".into(), consistency[0]),
        ("gvp_consistency_error".into(), consistency[1]),
    ]))
}

fn offsets(frames: &[[f32; 3]]) -> (Array3<f32>, Array3<f32>) {
    let truth = Array3::<f32>::zeros((frames.len(), 1, 3));
    let mut pred = truth.clone();
    for (t, o) in frames.iter().enumerate() {
        for d in 0..3 {
            pred[[t, 0, d]] = o[d];
        }
    }
    (truth, pred)
}

fn metric_oracles(config: &Value, seed: u64) -> Result<Metrics> {
    let instances: usize = param(config, "instances")?;
    let mut hand = 0.0f64;
    let mut check = |got: f64, want: f64| hand = hand.max((got - want).abs());
    let (t, p) = offsets(&[[3.0, 4.0, 0.0], [3.0, 4.0, 0.0]]);
    check(ade(t.view(), p.view())?, 5.0);
    check(ade(t.view(), t.view())?, 0.0);
    check(fde(t.view(), t.view())?, 0.0);
    let (t, p) = offsets(&[[3.0, 4.0, 0.0], [6.0, 8.0, 0.0]]);
    check(ade(t.view(), p.view())?, 7.5);
    check(fde(t.view(), p.view())?, 10.0);
    let truth = Array3::<f32>::zeros((1, 2, 3));
    let mut pred = truth.clone();
    pred[[0, 0, 0]] = 3.0;
    pred[[0, 1, 1]] = 5.0;
    check(fde(truth.view(), pred.view())?, 4.0);
    let (t, near) = offsets(&[[0.0, 3.0, 0.0], [0.0, 3.0, 0.0]]);
    let (_, far) = offsets(&[[0.0, 5.0, 0.0], [0.0, 5.0, 0.0]]);
    let (min_ade, _) = min_metrics(t.view(), &[far.view(), near.view()])?;
    check(min_ade, 3.0);
    let (a, f) = min_metrics(t.view(), &[far.view(), t.view()])?;
    check(a, 0.0);
    check(f, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loops = 0.0f64;
    for _ in 0..instances {
        let (tt, n, d) = (rng.random_range(1..8), rng.random_range(1..6), rng.random_range(2..4));
        let truth = Array3::from_shape_fn((tt, n, d), |_| rng.random_range(-2.0f32..2.0));
        let pred = Array3::from_shape_fn((tt, n, d), |_| rng.random_range(-2.0f32..2.0));
        let dist = |t: usize, i: usize| -> f64 {
            (0..d)
                .map(|k| ((truth[[t, i, k]] - pred[[t, i, k]]) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut sum = 0.0;
        for t in 0..tt {
            for i in 0..n {
                sum += dist(t, i);
            }
        }
        let want_ade = sum / (tt * n) as f64;
        let want_fde = (0..n).map(|i| dist(tt - 1, i)).sum::<f64>() / n as f64;
        loops = loops
            .max((ade(truth.view(), pred.view())? - want_ade).abs())
            .max((fde(truth.view(), pred.view())? - want_fde).abs());
    }
    Ok(Metrics::from([
        ("hand_case_error".into(), hand),
        ("double_loop_error".into(), loops),
    ]))
}

fn spring_stage(pool: usize, seed: u64) -> Result<FirstStage> {
    let config = FirstStageConfig {
        encoder: EncoderConfig {
            pool_size: pool,
            ..EncoderConfig::default()
        },
        training: crate::first_stage::FirstStageTraining {
            seed,
            ..Default::default()
        },
        ..FirstStageConfig::default()
    };
    let data = DataSpec {
        spatial_dim: 3,
        properties: PropertyKind::for_scenario(Scenario::Spring),
    };
    FirstStage::new(&config, &data, Normalizer::identity(3, 1))
}

fn encoder_structure(config: &Value, seed: u64) -> Result<Metrics> {
    let max_n: usize = param(config, "max_entities")?;
    let stage = spring_stage(max_n, seed)?;
    let (l, dz) = (stage.model().num_latents(), stage.model().latent_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape_failures = 0usize;
    let (mut mean_abs, mut var_err, mut equivariance) = (0.0f64, 0.0f64, 0.0f64);
    for n in 1..=max_n {
        let pos = Array3::from_shape_fn((1, n, 3), |_| rng.random_range(-1.0f32..1.0));
        let props = Array3::from_shape_fn((1, n, 1), |_| rng.random_range(0.5f32..1.5));
        let ids: Vec<usize> = (0..n).collect();
        let z = stage.encode(pos.view(), props.view(), &[&ids])?;
        if z.dims() != [1, l, dz] {
            shape_failures += 1;
        }
        let z64 = z.to_dtype(DType::F64)?;
        let mean = z64.mean_keepdim(2)?;
        let var = z64.broadcast_sub(&mean)?.sqr()?.mean(2)?;
        mean_abs = mean_abs.max(mean.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?);
        var_err = var_err.max((var - 1.0)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?);

        let perm: Vec<usize> = (0..n).rev().collect();
        let (x, _) = stage.decode(&z, &[&ids])?;
        let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let (xp, _) = stage.decode(&z, &[&permuted])?;
        for (i, &p) in perm.iter().enumerate() {
            for d in 0..3 {
                equivariance = equivariance.max((xp[[0, i, d]] - x[[0, p, d]]).abs() as f64);
            }
        }
    }
    Ok(Metrics::from([
        ("shape_failures".into(), shape_failures as f64),
        ("latent_mean_abs".into(), mean_abs),
        ("latent_var_error".into(), var_err),
        ("decoder_equivariance_error".into(), equivariance),
    ]))
}

fn euler_closed_form(config: &Value) -> Result<Metrics> {
    let steps: usize = param(config, "steps")?;
    let z0: f64 = param(config, "z0")?;
    let field = FnField(|z: &Tensor, _| Ok(z.clone()));
    let out = integrate_euler(&field, &Tensor::new(&[z0], &Device::Cpu)?, steps)?;
    let value = out.z.to_vec1::<f64>()?[0];
    Ok(Metrics::from([
        ("euler_value".into(), value),
        ("nfe".into(), out.nfe as f64),
    ]))
}

fn physics_generators(config: &Value, seed: u64) -> Result<Metrics> {
    let seeds: u64 = param(config, "seeds")?;
    let mut drift = BTreeMap::new();
    for scenario in [Scenario::Spring, Scenario::Gravity] {
        let cfg = ScenarioConfig::default_for(scenario);
        let worst = (0..seeds)
            .map(|s| simulate(&cfg, seed + s).map(|sim| sim.diagnostics.momentum_drift()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        drift.insert(format!("{scenario}_momentum_drift"), worst);
    }

    let base = ScenarioConfig {
        num_entities: 2,
        frames: 2,
        ..ScenarioConfig::default_for(Scenario::Gravity)
    };
    let (m1, m2, r) = (1.0, 0.5, 2.0);
    let eps2 = base.softening * base.softening;
    let v_rel = r * (base.coupling * (m1 + m2) / (r * r + eps2).powf(1.5)).sqrt();
    let period = 2.0 * std::f64::consts::PI * r / v_rel;
    let total = m1 + m2;
    let steps = (period / base.dt).ceil() as usize;
    let cfg = ScenarioConfig {
        stride: 1,
        frames: steps + 1,
        ..base
    };
    let ic = InitialConditions {
        positions: ndarray::array![[-r * m2 / total, 0.0, 0.0], [r * m1 / total, 0.0, 0.0]],
        velocities: ndarray::array![[0.0, -v_rel * m2 / total, 0.0], [0.0, v_rel * m1 / total, 0.0]],
        masses: vec![m1, m2],
        charges: vec![1.0, 1.0],
        springs: ndarray::Array2::from_elem((2, 2), false),
    };
    let sim = simulate_from(&cfg, ic)?;
    let mut radius = 0.0f64;
    for f in 0..cfg.frames {
        let d: f64 = (0..3)
            .map(|k| (sim.positions[[f, 0, k]] - sim.positions[[f, 1, k]]).powi(2))
            .sum::<f64>()
            .sqrt();
        radius = radius.max((d - r).abs() / r);
    }

    let counts = SplitCounts { train: 3, val: 2, test: 2 };
    let small = ScenarioConfig {
        frames: 12,
        ..ScenarioConfig::default_for(Scenario::Charged)
    };
    let a = generate_dataset(&small, counts, seed)?;
    let b = generate_dataset(&small, counts, seed)?;
    let mut mismatches = 0usize;
    for (x, y) in a.iter().zip(&b) {
        if x.seeds != y.seeds {
            mismatches += 1;
        }
        for (p, q) in x.trajectories.iter().zip(&y.trajectories) {
            if p.positions != q.positions || p.properties != q.properties {
                mismatches += 1;
            }
        }
    }
    let mut out: Metrics = drift;
    out.insert("orbit_radius_deviation".into(), radius);
    out.insert("determinism_mismatches".into(), mismatches as f64);
    Ok(out)
}

fn freeze_ema(config: &Value, seed: u64) -> Result<Metrics> {
    let cfg: RunConfig = serde_json::from_value(param::<Value>(config, "run")?)
        .map_err(|e| Error::Config(format!("freeze-ema run config: {e}")))?;
    cfg.validate()?;
    let splits = generate_dataset(&cfg.data.scenario_config(), cfg.data.counts, seed)?;
    let (stage1, _) = train_first_stage(&splits[0], None, &cfg.first_stage, &TrainOptions::default())?;
    let before = stage1.checksum()?;
    let (_, _, freeze) = train_second_stage(
        &stage1,
        &splits[0],
        None,
        &cfg.second_stage.stage_config(),
        &SecondStageOptions::default(),
    )?;
    let after = stage1.checksum()?;
    let changed = usize::from(!freeze.unchanged()) + usize::from(before != after);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live = BTreeMap::from([("w".to_string(), random_tensor(&mut rng, &[4, 3])?)]);
    let shadow = BTreeMap::from([("w".to_string(), random_tensor(&mut rng, &[4, 3])?)]);
    let (l, e) = (&live["w"], &shadow["w"]);
    let mut ema_err = 0.0f64;
    for (beta, want) in [
        (0.0, l.clone()),
        (1.0, e.clone()),
        (0.999, ((e * 0.999)? + (l * 0.001)?)?),
    ] {
        let out = ema_update(&live, &EmaState::new(beta, shadow.clone())?)?;
        ema_err = ema_err.max(max_abs_diff(&out.shadow["w"], &want)?);
    }
    Ok(Metrics::from([
        ("stage1_changed".into(), changed as f64),
        ("ema_error".into(), ema_err),
    ]))
}

/// Data and trained checkpoints for the desk-scale goldens, cached on disk.
pub struct DeskPipeline {
    pub splits: Vec<TrajectoryDataset>,
    pub stage1: FirstStage,
    pub stage2: Option<SecondStage>,
}

impl DeskPipeline {
    pub fn prepare(cfg: &RunConfig, dir: &Path, with_stage2: bool, verbose: bool) -> Result<Self> {
        let splits = generate_dataset(&cfg.data.scenario_config(), cfg.data.counts, cfg.seed)?;
        let s1_dir = dir.join("stage1");
        let stage1 = match FirstStage::read_sidecar(&s1_dir) {
            Ok(side) if side.config == cfg.first_stage && side.epochs_done == cfg.first_stage.training.epochs => {
                FirstStage::load(&s1_dir, WeightSet::Preferred)?
            }
            _ => {
                let opts = TrainOptions {
                    out_dir: Some(s1_dir.clone()),
                    resume: true,
                    verbose,
                };
                train_first_stage(&splits[0], Some(&splits[1]), &cfg.first_stage, &opts)?.0
            }
        };
        let stage2 = if with_stage2 {
            let s2_dir = dir.join("stage2");
            let s2cfg = cfg.second_stage.stage_config();
            let cached = match SecondStage::read_sidecar(&s2_dir) {
                // A retrained first stage invalidates the cached second stage.
                Ok(side) if side.config == s2cfg && side.epochs_done == s2cfg.training.epochs => {
                    match SecondStage::load(&s2_dir, &stage1, None) {
                        Ok(s) => Some(s),
                        Err(Error::Incompatible(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
                _ => None,
            };
            Some(match cached {
                Some(s) => s,
                None => {
                    let opts = SecondStageOptions {
                        out_dir: Some(s2_dir),
                        stage1_dir: Some(s1_dir),
                        verbose,
                    };
                    train_second_stage(&stage1, &splits[0], Some(&splits[1]), &s2cfg, &opts)?.0
                }
            })
        } else {
            None
        };
        Ok(Self { splits, stage1, stage2 })
    }

    fn stage2(&self) -> Result<&SecondStage> {
        self.stage2
            .as_ref()
            .ok_or_else(|| Error::Config("pipeline was prepared without a second stage".into()))
    }

    pub fn stage1_metrics(&self, cfg: &RunConfig) -> Result<Metrics> {
        let test = &self.splits[2];
        let rec = evaluate_reconstruction(&self.stage1, test, cfg.seed)?;
        let seeds: Vec<u64> = (0..5).map(|k| cfg.seed + 100 + k).collect();
        let rob = assignment_robustness(&self.stage1, test, &seeds)?;
        Ok(Metrics::from([
            ("relative_error".into(), rec.relative_error),
            ("mean_position_error".into(), rec.mean_position_error),
            ("robustness_cv".into(), rob.std / rob.mean),
        ]))
    }

    pub fn evaluate(&self, cfg: &RunConfig) -> Result<Evaluation> {
        evaluate_model(
            &self.stage1,
            self.stage2()?,
            &self.splits[2],
            &cfg.protocol(),
            &cfg.second_stage.inference,
        )
    }

    pub fn forecast_metrics(&self, cfg: &RunConfig) -> Result<Metrics> {
        let r = self.evaluate(cfg)?.report;
        Ok(Metrics::from([
            ("model_ade".into(), r.model.ade),
            ("model_fde".into(), r.model.fde),
            ("static_ade".into(), r.static_baseline.ade),
            ("static_fde".into(), r.static_baseline.fde),
            ("linear_ade".into(), r.linear_baseline.ade),
            ("linear_fde".into(), r.linear_baseline.fde),
            ("ade_ratio_static".into(), r.model.ade / r.static_baseline.ade),
            ("fde_ratio_static".into(), r.model.fde / r.static_baseline.fde),
            ("ade_ratio_linear".into(), r.model.ade / r.linear_baseline.ade),
            ("fde_ratio_linear".into(), r.model.fde / r.linear_baseline.fde),
        ]))
    }

    pub fn rollout_metrics(&self, cfg: &RunConfig) -> Result<Metrics> {
        let test = &self.splits[2];
        let traj = &test.trajectories[0];
        let block_len = cfg.data.scenario_config().frames;
        let plan = RolloutPlan::new(block_len, 3)?;
        let ids = IdentifierAssignment::sequential(traj.num_entities(), self.stage1.pool())?;
        let initial = SystemState::new(traj.frame(0).to_owned(), traj.properties.clone(), 0)?;
        let out = cascaded_rollout(
            &self.stage1,
            self.stage2()?,
            &initial,
            traj.dt,
            &ids,
            plan,
            &cfg.second_stage.inference,
        )?;
        let pos = &out.trajectory.positions;
        let non_finite = pos.iter().filter(|v| !v.is_finite()).count();
        // Each block must start from the exact frame the previous block ended on.
        let mut gaps = 0usize;
        for (b, rep) in out.blocks.iter().enumerate() {
            if rep.start != b * (block_len - 1) {
                gaps += 1;
            }
        }
        let step = |t: usize| -> f64 {
            let d = &pos.slice(s![t, .., ..]) - &pos.slice(s![t - 1, .., ..]);
            d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
        };
        let boundary: Vec<f64> = out.blocks.iter().skip(1).map(|r| step(r.start + 1)).collect();
        let interior: Vec<f64> = (1..pos.dim().0)
            .filter(|t| !out.blocks.iter().any(|r| r.start + 1 == *t))
            .map(step)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(Metrics::from([
            ("frames".into(), pos.dim().0 as f64),
            ("non_finite".into(), non_finite as f64),
            ("block_offset_errors".into(), gaps as f64),
            ("boundary_step_ratio".into(), mean(&boundary) / mean(&interior).max(f64::MIN_POSITIVE)),
            ("max_roundtrip_drift".into(), out.blocks.iter().map(|r| r.roundtrip_drift).fold(0.0, f64::max)),
        ]))
    }
}

/// Canonical config value for the desk pipeline goldens.
pub fn desk_config_value() -> Result<Value> {
    Ok(serde_json::to_value(RunConfig::desk(Scenario::Spring).effective())?)
}

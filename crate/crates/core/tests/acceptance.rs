//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line, even when it passes.
//!
//! Set `ENTITY_FLOW_ACCEPTANCE_CACHE` to a directory to reuse trained desk
//! checkpoints between runs; otherwise they are trained into a temp dir.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use entity_flow::approximator::{train_second_stage, SecondStage, SecondStageOptions};
use entity_flow::config::RunConfig;
use entity_flow::ema::{ema_update, EmaState};
use entity_flow::evaluation::{ade, fde, min_metrics};
use entity_flow::first_stage::{train_first_stage, FirstStage, TrainOptions};
use entity_flow::identifiers::{count_assignments, IdentifierAssignment};
use entity_flow::interpolants::{interpolate, velocity_from_data_prediction, Schedule, SingularityPolicy};
use entity_flow::nbody::{
    generate_dataset, simulate, simulate_from, InitialConditions, Scenario, ScenarioConfig, SplitCounts,
    TrajectoryDataset,
};
use entity_flow::repro::DeskPipeline;
use entity_flow::sampler::{cascaded_rollout, integrate_euler, manifest, sample_k, FnField, RolloutPlan, SamplerConfig};
use entity_flow::types::{SystemState, TrajectorySlice};
use ndarray::{s, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const C1_MAX_POOL: usize = 6;
const C1_BUDGET_S: f64 = 1.0;
const C2_TOL: f64 = 1e-12;
const C2_GRID: usize = 101;
const C2_BUDGET_S: f64 = 1.0;
const C3_DRAWS: usize = 1000;
const C3_CLOSED_TOL: f64 = 1e-9;
const C3_CONSISTENCY_TOL: f64 = 1e-6;
const C3_TAU: (f64, f64) = (0.05, 0.95);
const C3_BUDGET_S: f64 = 10.0;
const C4_TOL: f64 = 1e-7;
const C4_INSTANCES: usize = 100;
const C5_MAX_N: usize = 64;
const C5_EQUIVARIANCE_TOL: f64 = 1e-5;
const C5_MEAN_TOL: f64 = 1e-5;
const C5_VAR_TOL: f64 = 1e-3;
const C6_EXPECTED: f64 = 2.59374;
const C6_TOL: f64 = 1e-5;
const C6_STEPS: usize = 10;
const C7_MAX_EPOCHS: usize = 200;
const C7_REL_ERROR: f64 = 0.05;
const C7_ROBUST_CV: f64 = 0.10;
const C7_SEEDS: usize = 5;
const C7_BUDGET_S: f64 = 8.0 * 3600.0;
const C8_MAX_EPOCHS: usize = 300;
const C8_K: usize = 5;
const C8_BUDGET_S: f64 = 2.0 * 3600.0;
const C9_MOMENTUM_TOL: f64 = 1e-6;
const C9_ORBIT_TOL: f64 = 0.01;
const C9_SEEDS: u64 = 10;
const C10_EMA_TOL: f64 = 1e-12;
const C11_BLOCK: usize = 30;
const C11_BLOCKS: usize = 3;
const C11_FRAMES: usize = 88;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    let d: Vec<f64> = (a - b)
        .and_then(|t| t.to_dtype(DType::F64))
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1())
        .map_err(err)?;
    Ok(d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).map_err(err)
}

// Reference metrics, written as plain loops.
fn oracle_dist(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>, t: usize, i: usize) -> f64 {
    (0..a.dim().2)
        .map(|k| (a[[t, i, k]] as f64 - b[[t, i, k]] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn oracle_ade(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> f64 {
    let (t, n, _) = a.dim();
    let mut s = 0.0;
    for f in 0..t {
        for i in 0..n {
            s += oracle_dist(a, b, f, i);
        }
    }
    s / (t * n) as f64
}

fn oracle_fde(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> f64 {
    let (t, n, _) = a.dim();
    (0..n).map(|i| oracle_dist(a, b, t - 1, i)).sum::<f64>() / n as f64
}

fn c1_identifier_counting() -> Outcome {
    fn enumerate(n: usize, u: usize) -> u128 {
        // Count all maps {0..n} -> {0..u} and keep the injective ones.
        let total = (u as u128).pow(n as u32);
        let mut count = 0;
        for code in 0..total {
            let mut c = code;
            let mut seen = vec![false; u];
            let mut ok = true;
            for _ in 0..n {
                let v = (c % u as u128) as usize;
                c /= u as u128;
                if seen[v] {
                    ok = false;
                    break;
                }
                seen[v] = true;
            }
            if ok {
                count += 1;
            }
        }
        if n == 0 {
            1
        } else {
            count
        }
    }
    let start = Instant::now();
    let mut cases = 0;
    for u in 0..=C1_MAX_POOL {
        for n in 0..=u {
            let brute = enumerate(n, u);
            let closed = count_assignments(n, u);
            ensure(brute == closed, || format!("N={n}, u={u}: brute force {brute}, closed form {closed}"))?;
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < C1_BUDGET_S, || format!("took {secs:.3}s"))?;
    Ok(format!("{cases} (N, u) pairs agree in {secs:.3}s"))
}

fn c2_interpolants() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for schedule in [Schedule::Linear, Schedule::Gvp] {
        let a = schedule.eval(0.0).map_err(err)?;
        let b = schedule.eval(1.0).map_err(err)?;
        for (what, v) in [
            ("|alpha_0|", a.alpha.abs()),
            ("|sigma_1|", b.sigma.abs()),
            ("|alpha_1 - 1|", (b.alpha - 1.0).abs()),
            ("|sigma_0 - 1|", (a.sigma - 1.0).abs()),
        ] {
            ensure(v < C2_TOL, || format!("{schedule:?} {what} = {v:e}"))?;
            worst = worst.max(v);
        }
    }
    let mut norm = 0.0f64;
    for i in 0..C2_GRID {
        let tau = i as f64 / (C2_GRID - 1) as f64;
        let v = Schedule::Gvp.eval(tau).map_err(err)?;
        norm = norm.max((v.alpha.powi(2) + v.sigma.powi(2) - 1.0).abs());
    }
    ensure(norm <= C2_TOL, || format!("GVP alpha^2 + sigma^2 deviates by {norm:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < C2_BUDGET_S, || format!("took {secs:.3}s"))?;
    Ok(format!("boundary error {worst:.1e}, GVP norm error {norm:.1e}"))
}

fn c3_velocity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut closed, mut lin, mut gvp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..C3_DRAWS {
        let tau = rng.random_range(C3_TAU.0..=C3_TAU.1);
        let o_tau = normal(&mut rng, &[3, 5])?;
        let o_hat = normal(&mut rng, &[3, 5])?;
        let v = velocity_from_data_prediction(&o_tau, &o_hat, tau, Schedule::Linear, SingularityPolicy::Strict)
            .map_err(err)?;
        let want = ((&o_hat - &o_tau).and_then(|d| d / (1.0 - tau))).map_err(err)?;
        closed = closed.max(max_abs(&v.value, &want)?);

        let o1 = normal(&mut rng, &[3, 5])?;
        let eps = normal(&mut rng, &[3, 5])?;
        // Hand-written derivatives of both schedules.
        let derivs = [
            (Schedule::Linear, 1.0, -1.0),
            (Schedule::Gvp, FRAC_PI_2 * (FRAC_PI_2 * tau).cos(), -FRAC_PI_2 * (FRAC_PI_2 * tau).sin()),
        ];
        for (schedule, a_dot, s_dot) in derivs {
            let o = interpolate(&o1, &eps, tau, schedule).map_err(err)?;
            let v = velocity_from_data_prediction(&o, &o1, tau, schedule, SingularityPolicy::Strict).map_err(err)?;
            let want = ((&o1 * a_dot).and_then(|a| a + (&eps * s_dot)?)).map_err(err)?;
            let e = max_abs(&v.value, &want)?;
            if schedule == Schedule::Linear {
                lin = lin.max(e);
            } else {
                gvp = gvp.max(e);
            }
        }
    }
    ensure(closed < C3_CLOSED_TOL, || format!("closed form error {closed:e}"))?;
    ensure(lin < C3_CONSISTENCY_TOL, || format!("linear consistency error {lin:e}"))?;
    ensure(gvp < C3_CONSISTENCY_TOL, || format!("GVP consistency error {gvp:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < C3_BUDGET_S, || format!("took {secs:.2}s"))?;
    Ok(format!("closed form {closed:.1e}, consistency linear {lin:.1e} / GVP {gvp:.1e}, {secs:.2}s"))
}

fn offsets(per_frame: &[&[[f32; 3]]]) -> (Array3<f32>, Array3<f32>) {
    let (t, n) = (per_frame.len(), per_frame[0].len());
    let truth = Array3::<f32>::zeros((t, n, 3));
    let pred = Array3::from_shape_fn((t, n, 3), |(f, i, k)| per_frame[f][i][k]);
    (truth, pred)
}

fn c4_metrics() -> Outcome {
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();
    let (t, p) = offsets(&[&[[3.0, 4.0, 0.0]], &[[3.0, 4.0, 0.0]]]);
    cases.push(("ADE constant offset", ade(t.view(), p.view()).map_err(err)?, 5.0));
    cases.push(("ADE exact", ade(t.view(), t.view()).map_err(err)?, 0.0));
    cases.push(("FDE exact", fde(t.view(), t.view()).map_err(err)?, 0.0));
    let (t, p) = offsets(&[&[[3.0, 4.0, 0.0]], &[[6.0, 8.0, 0.0]]]);
    cases.push(("ADE 5 then 10", ade(t.view(), p.view()).map_err(err)?, 7.5));
    cases.push(("FDE 5 then 10", fde(t.view(), p.view()).map_err(err)?, 10.0));
    let (t, p) = offsets(&[&[[3.0, 0.0, 0.0], [0.0, 5.0, 0.0]]]);
    cases.push(("FDE two entities", fde(t.view(), p.view()).map_err(err)?, 4.0));
    let (t, far) = offsets(&[&[[0.0, 5.0, 0.0]]]);
    let (_, near) = offsets(&[&[[0.0, 3.0, 0.0]]]);
    let (min_ade, min_fde) = min_metrics(t.view(), &[far.view(), near.view()]).map_err(err)?;
    cases.push(("minADE {5, 3}", min_ade, 3.0));
    cases.push(("minFDE {5, 3}", min_fde, 3.0));
    let (a, f) = min_metrics(t.view(), &[far.view()]).map_err(err)?;
    cases.push(("K=1 minADE", a, 5.0));
    cases.push(("K=1 minFDE", f, 5.0));
    let (a, f) = min_metrics(t.view(), &[far.view(), t.view(), near.view()]).map_err(err)?;
    cases.push(("perfect sample minADE", a, 0.0));
    cases.push(("perfect sample minFDE", f, 0.0));
    for (name, got, want) in &cases {
        ensure((got - want).abs() <= C4_TOL, || format!("{name}: got {got}, want {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..C4_INSTANCES {
        let dims = (rng.random_range(1..10), rng.random_range(1..8), rng.random_range(2..=3));
        let a = Array3::from_shape_fn(dims, |_| rng.random_range(-3.0f32..3.0));
        let b = Array3::from_shape_fn(dims, |_| rng.random_range(-3.0f32..3.0));
        worst = worst
            .max((ade(a.view(), b.view()).map_err(err)? - oracle_ade(a.view(), b.view())).abs())
            .max((fde(a.view(), b.view()).map_err(err)? - oracle_fde(a.view(), b.view())).abs());
    }
    ensure(worst <= C4_TOL, || format!("double-loop disagreement {worst:e}"))?;
    Ok(format!("{} hand cases exact, double-loop max error {worst:.1e}", cases.len()))
}

fn pool_stage(pool: usize) -> Result<FirstStage, String> {
    let mut cfg = RunConfig::desk(Scenario::Spring).first_stage;
    cfg.encoder.pool_size = pool;
    let ds = generate_dataset(
        &ScenarioConfig {
            frames: 2,
            ..ScenarioConfig::default_for(Scenario::Spring)
        },
        SplitCounts { train: 2, val: 1, test: 1 },
        5,
    )
    .map_err(err)?;
    FirstStage::for_dataset(&cfg, &ds[0]).map_err(err)
}

fn c5_structure() -> Outcome {
    let stage = pool_stage(C5_MAX_N)?;
    let (l, dz) = (stage.model().num_latents(), stage.model().latent_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_eq, mut worst_mean, mut worst_var) = (0.0f64, 0.0f64, 0.0f64);
    for n in 1..=C5_MAX_N {
        let pos = Array3::from_shape_fn((1, n, 3), |_| rng.random_range(-1.5f32..1.5));
        let props = Array3::from_shape_fn((1, n, 1), |_| rng.random_range(0.5f32..1.5));
        let mut ids: Vec<usize> = (0..C5_MAX_N).collect();
        ids.shuffle(&mut rng);
        ids.truncate(n);
        let z = stage.encode(pos.view(), props.view(), &[&ids]).map_err(err)?;
        ensure(z.dims() == [1, l, dz], || format!("N={n}: latent shape {:?}", z.dims()))?;
        let rows: Vec<Vec<f32>> = z.squeeze(0).and_then(|t| t.to_vec2()).map_err(err)?;
        for row in rows {
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / dz as f64;
            let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / dz as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
        let (x, _) = stage.decode(&z, &[&ids]).map_err(err)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let (xp, _) = stage.decode(&z, &[&permuted]).map_err(err)?;
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..3 {
                worst_eq = worst_eq.max((xp[[0, i, k]] - x[[0, p, k]]).abs() as f64);
            }
        }
    }
    ensure(worst_eq < C5_EQUIVARIANCE_TOL, || format!("equivariance error {worst_eq:e}"))?;
    ensure(worst_mean < C5_MEAN_TOL, || format!("latent mean {worst_mean:e}"))?;
    ensure(worst_var < C5_VAR_TOL, || format!("latent variance error {worst_var:e}"))?;
    Ok(format!(
        "shape ({l}, {dz}) for N=1..{C5_MAX_N}, equivariance {worst_eq:.1e}, |mu| {worst_mean:.1e}, |var-1| {worst_var:.1e}"
    ))
}

fn c6_euler() -> Outcome {
    let field = FnField(|z: &Tensor, _| Ok(z.clone()));
    let z0 = Tensor::new(&[1.0f64], &Device::Cpu).map_err(err)?;
    let out = integrate_euler(&field, &z0, C6_STEPS).map_err(err)?;
    let value = out.z.to_vec1::<f64>().map_err(err)?[0];
    ensure((value - C6_EXPECTED).abs() <= C6_TOL, || format!("z(1) = {value}"))?;
    ensure((value - 1.1f64.powi(10)).abs() < 1e-12, || format!("z(1) = {value} differs from 1.1^10"))?;
    ensure(out.nfe == C6_STEPS, || format!("integrator NFE {}", out.nfe))?;

    // The run manifest of a real sampling call carries the same count.
    let stage1 = pool_stage(10)?;
    let mut s2cfg = RunConfig::desk(Scenario::Spring).second_stage.stage_config();
    s2cfg.flow.hidden = 32;
    s2cfg.flow.layers = 1;
    let stage2 = SecondStage::new(&s2cfg, &stage1).map_err(err)?;
    let cfg = SamplerConfig {
        steps: C6_STEPS,
        k: 2,
        ..SamplerConfig::default()
    };
    let observed = TrajectorySlice {
        positions: Array3::from_shape_fn((3, 4, 3), |(t, i, k)| (t + i + k) as f32 * 0.1),
        properties: Array2::ones((4, 1)),
        dt: 0.1,
        start: 0,
    };
    let ids = IdentifierAssignment::sequential(4, stage1.pool()).map_err(err)?;
    let set = sample_k(&stage1, &stage2, &observed, &ids, &cfg, 6).map_err(err)?;
    let man = manifest(&stage1, &stage2, &cfg, 3, 6, &set).map_err(err)?;
    ensure(man.nfe_per_sample == vec![C6_STEPS; 2], || format!("manifest NFE {:?}", man.nfe_per_sample))?;
    Ok(format!("z(1) = {value:.6}, NFE {} (manifest {:?})", out.nfe, man.nfe_per_sample))
}

struct Desk {
    config: RunConfig,
    pipeline: DeskPipeline,
    prep_seconds: f64,
    _tmp: Option<tempfile::TempDir>,
}

fn desk() -> Result<Desk, String> {
    let config = RunConfig::desk(Scenario::Spring);
    let (dir, tmp) = match std::env::var_os("ENTITY_FLOW_ACCEPTANCE_CACHE") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().map_err(err)?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    let start = Instant::now();
    let pipeline = DeskPipeline::prepare(&config, &dir, true, true).map_err(err)?;
    Ok(Desk {
        config,
        pipeline,
        prep_seconds: start.elapsed().as_secs_f64(),
        _tmp: tmp,
    })
}

fn random_ids(n: usize, pool: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..pool).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    ids
}

fn pooled_std(ds: &TrajectoryDataset) -> f64 {
    let all: Vec<f64> = ds.trajectories.iter().flat_map(|t| t.positions.iter().map(|v| *v as f64)).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
}

fn reconstruction(stage: &FirstStage, ds: &TrajectoryDataset, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = stage.pool().size();
    let (mut sum, mut count) = (0.0, 0usize);
    for traj in &ds.trajectories {
        let (t, n, _) = traj.positions.dim();
        let ids = random_ids(n, pool, &mut rng);
        let refs: Vec<&[usize]> = (0..t).map(|_| ids.as_slice()).collect();
        let props = Array3::from_shape_fn((t, n, traj.properties.ncols()), |(_, i, c)| traj.properties[[i, c]]);
        let z = stage.encode(traj.positions.view(), props.view(), &refs).map_err(err)?;
        let (x, _) = stage.decode(&z, &refs).map_err(err)?;
        sum += oracle_ade(traj.positions.view(), x.view()) * (t * n) as f64;
        count += t * n;
    }
    Ok(sum / count as f64)
}

fn c7_stage1(d: &Desk) -> Outcome {
    let epochs = d.config.first_stage.training.epochs;
    ensure(epochs <= C7_MAX_EPOCHS, || format!("desk config trains {epochs} epochs"))?;
    ensure(d.config.data.counts == SplitCounts { train: 500, val: 100, test: 100 }, || "split sizes differ".into())?;
    let enc = &d.config.first_stage.encoder;
    ensure((enc.num_latents, enc.latent_dim) == (16, 32), || "latent size differs".into())?;
    let test = &d.pipeline.splits[2];
    let std = pooled_std(test);
    let errors: Vec<f64> = (0..C7_SEEDS as u64)
        .map(|s| reconstruction(&d.pipeline.stage1, test, 1000 + s))
        .collect::<Result<_, _>>()?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errors.len() - 1) as f64).sqrt();
    let rel = errors[0] / std;
    ensure(rel <= C7_REL_ERROR, || format!("reconstruction error {:.4} = {:.2}% of std {std:.4}", errors[0], 100.0 * rel))?;
    ensure(sd / mean < C7_ROBUST_CV, || format!("assignment std/mean = {:.3}", sd / mean))?;
    ensure(d.prep_seconds <= C7_BUDGET_S, || format!("pipeline took {:.0}s", d.prep_seconds))?;
    Ok(format!(
        "error {:.2}% of test std over {epochs} epochs; std/mean over {C7_SEEDS} assignments {:.3}",
        100.0 * rel,
        sd / mean
    ))
}

fn c8_forecast(d: &Desk) -> Outcome {
    let epochs = d.config.second_stage.training.epochs;
    ensure(epochs <= C8_MAX_EPOCHS, || format!("desk config trains {epochs} epochs"))?;
    let stage2 = d.pipeline.stage2.as_ref().ok_or("no second stage")?;
    let stage1 = &d.pipeline.stage1;
    let test = &d.pipeline.splits[2];
    let t_o = d.config.data.observed;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut sums = BTreeMap::<&str, (f64, f64)>::new();
    for (i, traj) in test.trajectories.iter().enumerate() {
        let (t, n, _) = traj.positions.dim();
        let ids = IdentifierAssignment::new(random_ids(n, stage1.pool().size(), &mut rng), stage1.pool()).map_err(err)?;
        let observed = TrajectorySlice {
            positions: traj.positions.slice(s![..t_o, .., ..]).to_owned(),
            properties: traj.properties.clone(),
            dt: traj.dt,
            start: 0,
        };
        let truth = traj.positions.slice(s![t_o.., .., ..]);
        let cfg = SamplerConfig {
            k: C8_K,
            seed: 9000 + i as u64,
            ..d.config.second_stage.inference.clone()
        };
        let set = sample_k(stage1, stage2, &observed, &ids, &cfg, t).map_err(err)?;
        ensure(set.forecasts.len() == C8_K, || format!("{} forecasts", set.forecasts.len()))?;
        let (mut a, mut f) = (0.0, 0.0);
        for fc in &set.forecasts {
            a += oracle_ade(truth, fc.positions.view()) / C8_K as f64;
            f += oracle_fde(truth, fc.positions.view()) / C8_K as f64;
        }
        let e = sums.entry("model").or_default();
        e.0 += a;
        e.1 += f;
        let last = traj.positions.slice(s![t_o - 1, .., ..]);
        let prev = traj.positions.slice(s![t_o - 2, .., ..]);
        let horizon = t - t_o;
        let still = Array3::from_shape_fn((horizon, n, 3), |(_, j, k)| last[[j, k]]);
        let linear = Array3::from_shape_fn((horizon, n, 3), |(h, j, k)| {
            last[[j, k]] + (h + 1) as f32 * (last[[j, k]] - prev[[j, k]])
        });
        for (name, pred) in [("static", &still), ("linear", &linear)] {
            let e = sums.entry(name).or_default();
            e.0 += oracle_ade(truth, pred.view());
            e.1 += oracle_fde(truth, pred.view());
        }
    }
    let m = test.len() as f64;
    let get = |k: &str| (sums[k].0 / m, sums[k].1 / m);
    let (model, still, linear) = (get("model"), get("static"), get("linear"));
    let line = format!(
        "ADE/FDE model {:.4}/{:.4}, static {:.4}/{:.4}, linear {:.4}/{:.4} ({epochs} epochs)",
        model.0, model.1, still.0, still.1, linear.0, linear.1
    );
    ensure(model.0 < still.0 && model.0 < linear.0, || format!("ADE not below both baselines: {line}"))?;
    ensure(model.1 < still.1 && model.1 < linear.1, || format!("FDE not below both baselines: {line}"))?;
    ensure(d.prep_seconds <= C8_BUDGET_S, || format!("pipeline took {:.0}s: {line}", d.prep_seconds))?;
    Ok(line)
}

fn c9_physics() -> Outcome {
    let mut worst = 0.0f64;
    let mut com_worst = 0.0f64;
    for scenario in [Scenario::Spring, Scenario::Gravity] {
        let cfg = ScenarioConfig::default_for(scenario);
        for seed in 0..C9_SEEDS {
            let sim = simulate(&cfg, seed).map_err(err)?;
            let drift = sim.diagnostics.momentum_drift();
            ensure(drift < C9_MOMENTUM_TOL, || format!("{scenario} seed {seed}: momentum drift {drift:e}"))?;
            worst = worst.max(drift);
            // Conserved momentum means the centre of mass moves at constant velocity.
            let ic = &sim.initial;
            let mass: f64 = ic.masses.iter().sum();
            let scale: f64 = (0..cfg.num_entities)
                .map(|i| ic.masses[i] * (0..cfg.dim).map(|k| ic.velocities[[i, k]].powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / mass;
            let com = |f: usize, k: usize| -> f64 {
                (0..cfg.num_entities).map(|i| ic.masses[i] * sim.positions[[f, i, k]]).sum::<f64>() / mass
            };
            let frame_dt = cfg.dt * cfg.stride as f64;
            for k in 0..cfg.dim {
                let v0 = (com(1, k) - com(0, k)) / frame_dt;
                for f in 1..cfg.frames - 1 {
                    let v = (com(f + 1, k) - com(f, k)) / frame_dt;
                    com_worst = com_worst.max((v - v0).abs() / scale);
                }
            }
        }
    }
    ensure(com_worst < C9_MOMENTUM_TOL, || format!("centre-of-mass velocity drift {com_worst:e}"))?;

    let base = ScenarioConfig {
        num_entities: 2,
        frames: 2,
        ..ScenarioConfig::default_for(Scenario::Gravity)
    };
    let (m1, m2, r) = (1.0, 0.5, 2.0);
    let soft2 = base.softening.powi(2);
    // Softened circular orbit: v^2 / r = G (m1 + m2) r / (r^2 + eps^2)^(3/2) for the relative motion.
    let v_rel = (base.coupling * (m1 + m2) * r * r / (r * r + soft2).powf(1.5)).sqrt();
    let period = 2.0 * std::f64::consts::PI * r / v_rel;
    let steps = (period / base.dt).ceil() as usize;
    let cfg = ScenarioConfig {
        stride: 1,
        frames: steps + 1,
        ..base
    };
    let mt = m1 + m2;
    let ic = InitialConditions {
        positions: ndarray::array![[-r * m2 / mt, 0.0, 0.0], [r * m1 / mt, 0.0, 0.0]],
        velocities: ndarray::array![[0.0, -v_rel * m2 / mt, 0.0], [0.0, v_rel * m1 / mt, 0.0]],
        masses: vec![m1, m2],
        charges: vec![1.0, 1.0],
        springs: Array2::from_elem((2, 2), false),
    };
    let sim = simulate_from(&cfg, ic).map_err(err)?;
    let mut radius = 0.0f64;
    for f in 0..cfg.frames {
        let d = (0..3).map(|k| (sim.positions[[f, 0, k]] - sim.positions[[f, 1, k]]).powi(2)).sum::<f64>().sqrt();
        radius = radius.max((d - r).abs() / r);
    }
    ensure(radius < C9_ORBIT_TOL, || format!("orbit radius deviates by {:.3}%", 100.0 * radius))?;

    let small = ScenarioConfig {
        frames: 10,
        ..ScenarioConfig::default_for(Scenario::Charged)
    };
    let counts = SplitCounts { train: 4, val: 2, test: 2 };
    let a = generate_dataset(&small, counts, 99).map_err(err)?;
    let b = generate_dataset(&small, counts, 99).map_err(err)?;
    let c = generate_dataset(&small, counts, 100).map_err(err)?;
    for (x, y) in a.iter().zip(&b) {
        ensure(x.seeds == y.seeds, || "seeds differ between identical runs".into())?;
        for (p, q) in x.trajectories.iter().zip(&y.trajectories) {
            ensure(p.positions == q.positions && p.properties == q.properties, || "trajectories differ".into())?;
        }
    }
    ensure(a[0].trajectories[0].positions != c[0].trajectories[0].positions, || "master seed ignored".into())?;
    Ok(format!(
        "momentum drift {worst:.1e}, centre-of-mass drift {com_worst:.1e}, orbit radius deviation {radius:.1e}, deterministic"
    ))
}

fn bits(map: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Vec<u32>>, String> {
    map.iter()
        .map(|(k, t)| {
            let v: Vec<f32> = t.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
            Ok((k.clone(), v.iter().map(|x| x.to_bits()).collect()))
        })
        .collect()
}

fn c10_freeze_ema() -> Outcome {
    let mut cfg = RunConfig::desk(Scenario::Spring);
    cfg.data.physics = Some(ScenarioConfig {
        frames: 8,
        ..ScenarioConfig::default_for(Scenario::Spring)
    });
    cfg.first_stage.training.epochs = 1;
    cfg.first_stage.training.batch_size = 16;
    cfg.second_stage.network.hidden = 32;
    cfg.second_stage.network.layers = 1;
    cfg.second_stage.training.epochs = 2;
    cfg.second_stage.training.batch_size = 4;
    cfg.second_stage.training.frames = 8;
    cfg.second_stage.training.cond_frames = vec![3];
    let ds = generate_dataset(&cfg.data.scenario_config(), SplitCounts { train: 8, val: 2, test: 2 }, 10).map_err(err)?;
    let (stage1, _) = train_first_stage(&ds[0], None, &cfg.first_stage, &TrainOptions::default()).map_err(err)?;
    let before = bits(&stage1.store().snapshot().map_err(err)?)?;
    let (stage2, curve, _) = train_second_stage(
        &stage1,
        &ds[0],
        Some(&ds[1]),
        &cfg.second_stage.stage_config(),
        &SecondStageOptions::default(),
    )
    .map_err(err)?;
    let after = bits(&stage1.store().snapshot().map_err(err)?)?;
    ensure(before == after, || "first-stage parameters changed".into())?;
    ensure(curve.len() == 2 && stage2.store().len() > 0, || "second stage did not train".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let live = BTreeMap::from([("p".to_string(), normal(&mut rng, &[5, 4])?), ("q".to_string(), normal(&mut rng, &[3])?)]);
    let shadow = BTreeMap::from([("p".to_string(), normal(&mut rng, &[5, 4])?), ("q".to_string(), normal(&mut rng, &[3])?)]);
    let mut worst = 0.0f64;
    for beta in [0.0, 0.999, 1.0] {
        let out = ema_update(&live, &EmaState::new(beta, shadow.clone()).map_err(err)?).map_err(err)?;
        for key in ["p", "q"] {
            let l: Vec<f64> = live[key].flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
            let e: Vec<f64> = shadow[key].flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
            let got: Vec<f64> = out.shadow[key].flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
            for ((g, l), e) in got.iter().zip(&l).zip(&e) {
                let want = beta * e + (1.0 - beta) * l;
                worst = worst.max((g - want).abs());
                if beta == 0.0 {
                    ensure(g == l, || "beta = 0 must copy the live weights".into())?;
                }
                if beta == 1.0 {
                    ensure(g == e, || "beta = 1 must keep the shadow weights".into())?;
                }
            }
        }
    }
    ensure(worst <= C10_EMA_TOL, || format!("EMA error {worst:e}"))?;
    Ok(format!("stage-1 bits unchanged over {} tensors, EMA max error {worst:.1e}", before.len()))
}

fn c11_rollout(d: &Desk) -> Outcome {
    let stage2 = d.pipeline.stage2.as_ref().ok_or("no second stage")?;
    let traj = &d.pipeline.splits[2].trajectories[0];
    let plan = RolloutPlan::new(C11_BLOCK, C11_BLOCKS).map_err(err)?;
    ensure(plan.total_frames() == C11_FRAMES, || format!("plan gives {} frames", plan.total_frames()))?;
    let ids = IdentifierAssignment::sequential(traj.num_entities(), d.pipeline.stage1.pool()).map_err(err)?;
    let initial = SystemState::new(traj.frame(0).to_owned(), traj.properties.clone(), 0).map_err(err)?;
    let out = cascaded_rollout(
        &d.pipeline.stage1,
        stage2,
        &initial,
        traj.dt,
        &ids,
        plan,
        &d.config.second_stage.inference,
    )
    .map_err(err)?;
    let pos = &out.trajectory.positions;
    ensure(pos.dim().0 == C11_FRAMES, || format!("rollout has {} frames", pos.dim().0))?;
    ensure(pos.iter().all(|v| v.is_finite()), || "rollout contains NaN or inf".into())?;
    ensure(pos.slice(s![0, .., ..]) == traj.frame(0), || "first frame is not the initial state".into())?;
    let starts: Vec<usize> = out.blocks.iter().map(|b| b.start).collect();
    let want: Vec<usize> = (0..C11_BLOCKS).map(|b| b * (C11_BLOCK - 1)).collect();
    ensure(starts == want, || format!("block starts {starts:?}, want {want:?}"))?;
    // Block b covers frames start..start + 30; consecutive blocks share exactly one frame.
    let covered: usize = out.blocks.iter().map(|_| C11_BLOCK - 1).sum::<usize>() + 1;
    ensure(covered == C11_FRAMES, || format!("blocks cover {covered} frames"))?;
    let drift = out.blocks.iter().map(|b| b.roundtrip_drift).fold(0.0, f64::max);
    Ok(format!("{C11_BLOCKS} x {C11_BLOCK} -> {} frames, all finite, block starts {starts:?}, max round-trip drift {drift:.4}", pos.dim().0))
}

fn main() {
    // `cargo test -- --list` and filters from other targets must not trigger training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter = args.iter().find(|a| !a.starts_with('-')).cloned();
    // `criterion_N` selects one criterion, `quick` skips the three that need trained checkpoints.
    let wanted = |n: u32| match filter.as_deref() {
        None | Some("acceptance") => true,
        Some("quick") => ![7, 8, 11].contains(&n),
        Some(f) => f == format!("criterion_{n}"),
    };

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let quick: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "identifier counting oracle", c1_identifier_counting),
        (2, "interpolant boundary/algebra", c2_interpolants),
        (3, "velocity reparameterization", c3_velocity),
        (4, "metric oracles", c4_metrics),
        (5, "encoder/decoder structure", c5_structure),
        (6, "Euler integrator and NFE", c6_euler),
        (9, "physics generators", c9_physics),
        (10, "freeze and EMA contracts", c10_freeze_ema),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            let r = f();
            report(n, name, &r);
            results.push((n, name, r));
        }
    }
    if wanted(7) || wanted(8) || wanted(11) {
        eprintln!("acceptance: preparing the desk pipeline (trains both stages unless cached)");
        match desk() {
            Ok(d) => {
                let heavy: [(u32, &str, fn(&Desk) -> Outcome); 3] = [
                    (7, "stage-1 desk reconstruction", c7_stage1),
                    (8, "end-to-end desk forecasting", c8_forecast),
                    (11, "cascaded rollout", c11_rollout),
                ];
                for (n, name, f) in heavy {
                    if wanted(n) {
                        let r = f(&d);
                        report(n, name, &r);
                        results.push((n, name, r));
                    }
                }
            }
            Err(e) => {
                for (n, name) in [(7, "stage-1 desk reconstruction"), (8, "end-to-end desk forecasting"), (11, "cascaded rollout")] {
                    if wanted(n) {
                        let r = Err(format!("pipeline failed: {e}"));
                        report(n, name, &r);
                        results.push((n, name, r));
                    }
                }
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("\nacceptance summary: {} passed, {failed} failed", results.len() - failed);
    for (n, name, r) in &results {
        println!("  criterion {n:>2} {:<32} {}", name, if r.is_ok() { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(n: u32, name: &str, r: &Outcome) {
    match r {
        Ok(msg) => println!("criterion {n:>2} PASS {name}: {msg}"),
        Err(msg) => println!("criterion {n:>2} FAIL {name}: {msg}"),
    }
}

//! Forecast metrics, baselines, benchmark protocol and report output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::SecondStage;
use crate::error::{Error, Result};
use crate::first_stage::FirstStage;
use crate::identifiers::{sample_assignment, IdentifierAssignment};
use crate::nbody::TrajectoryDataset;
use crate::sampler::{sample_k, sub_seed, SamplerConfig};
use crate::types::{split_observed, SplitSpec, Trajectory, TrajectorySlice};

fn same_shape(a: &ArrayView3<'_, f32>, b: &ArrayView3<'_, f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.dim().0 == 0 || a.dim().1 == 0 {
        return Err(Error::Shape(format!("{what}: need at least one frame and entity")));
    }
    Ok(())
}

fn dist(a: ndarray::ArrayView1<'_, f32>, b: ndarray::ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn frame_mean(truth: &ArrayView3<'_, f32>, pred: &ArrayView3<'_, f32>, f: usize) -> f64 {
    let n = truth.dim().1;
    (0..n)
        .map(|i| dist(truth.slice(s![f, i, ..]), pred.slice(s![f, i, ..])))
        .sum::<f64>()
        / n as f64
}

/// Mean Euclidean distance over every predicted frame and entity.
pub fn ade(truth: ArrayView3<'_, f32>, pred: ArrayView3<'_, f32>) -> Result<f64> {
    same_shape(&truth, &pred, "ade")?;
    let t = truth.dim().0;
    Ok((0..t).map(|f| frame_mean(&truth, &pred, f)).sum::<f64>() / t as f64)
}

/// Mean Euclidean distance over entities at the final frame.
pub fn fde(truth: ArrayView3<'_, f32>, pred: ArrayView3<'_, f32>) -> Result<f64> {
    same_shape(&truth, &pred, "fde")?;
    Ok(frame_mean(&truth, &pred, truth.dim().0 - 1))
}

/// `(min_k ADE, min_k FDE)`, each minimized independently.
pub fn min_metrics(truth: ArrayView3<'_, f32>, samples: &[ArrayView3<'_, f32>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Validation("min_metrics needs at least one sample".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples {
        best.0 = best.0.min(ade(truth, *s)?);
        best.1 = best.1.min(fde(truth, *s)?);
    }
    Ok(best)
}

/// Repeats the last observed frame `horizon` times.
pub fn baseline_static(observed: ArrayView3<'_, f32>, horizon: usize) -> Result<Array3<f32>> {
    let (t, n, d) = observed.dim();
    if t == 0 {
        return Err(Error::Validation("static baseline needs one observed frame".into()));
    }
    let last = observed.index_axis(Axis(0), t - 1);
    Ok(Array3::from_shape_fn((horizon, n, d), |(_, i, j)| last[[i, j]]))
}

/// Constant-velocity extrapolation from the last two observed frames.
pub fn baseline_linear(observed: ArrayView3<'_, f32>, horizon: usize) -> Result<Array3<f32>> {
    let (t, n, d) = observed.dim();
    if t < 2 {
        return Err(Error::Validation(format!("linear baseline needs two observed frames, got {t}")));
    }
    let last = observed.index_axis(Axis(0), t - 1);
    let prev = observed.index_axis(Axis(0), t - 2);
    Ok(Array3::from_shape_fn((horizon, n, d), |(f, i, j)| {
        let v = last[[i, j]] as f64 - prev[[i, j]] as f64;
        (last[[i, j]] as f64 + v * (f + 1) as f64) as f32
    }))
}

/// Anything that produces `k` forecasts of `horizon` frames for an observed window.
pub trait Forecaster {
    fn forecast(
        &self,
        trajectory: &Trajectory,
        observed: &TrajectorySlice,
        ids: &IdentifierAssignment,
        k: usize,
        seed: u64,
        horizon: usize,
    ) -> Result<Vec<Array3<f32>>>;
}

/// The two-stage model behind the [`Forecaster`] interface.
pub struct ModelForecaster<'a> {
    pub stage1: &'a FirstStage,
    pub stage2: &'a SecondStage,
    pub sampler: SamplerConfig,
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(
        &self,
        _trajectory: &Trajectory,
        observed: &TrajectorySlice,
        ids: &IdentifierAssignment,
        k: usize,
        seed: u64,
        horizon: usize,
    ) -> Result<Vec<Array3<f32>>> {
        let cfg = SamplerConfig {
            k,
            seed,
            ..self.sampler.clone()
        };
        let set = sample_k(self.stage1, self.stage2, observed, ids, &cfg, observed.num_frames() + horizon)?;
        Ok(set.forecasts.into_iter().map(|f| f.positions).collect())
    }
}

/// Returns the ground truth; every metric is zero.
pub struct OracleForecaster;

impl Forecaster for OracleForecaster {
    fn forecast(
        &self,
        trajectory: &Trajectory,
        observed: &TrajectorySlice,
        _ids: &IdentifierAssignment,
        k: usize,
        _seed: u64,
        horizon: usize,
    ) -> Result<Vec<Array3<f32>>> {
        let t_o = observed.num_frames();
        let fut = trajectory.positions.slice(s![t_o..t_o + horizon, .., ..]).to_owned();
        Ok(vec![fut; k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub k: usize,
    pub observed: usize,
    pub seed: u64,
    /// Evaluate only the first trajectories of the split.
    pub max_trajectories: Option<usize>,
    /// Keep forecasts of this many trajectories for plotting.
    pub plot_cases: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            k: 5,
            observed: 10,
            seed: 0,
            max_trajectories: None,
            plot_cases: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub traj_id: usize,
    pub method: String,
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub k: usize,
    pub observed: usize,
    pub horizon: usize,
    pub seed: u64,
    pub trajectories: usize,
    /// Mean over trajectories of the per-trajectory mean over K draws.
    pub model: MethodSummary,
    pub static_baseline: MethodSummary,
    pub linear_baseline: MethodSummary,
    pub rows: Vec<MetricRow>,
    pub stage1_hash: Option<String>,
    pub stage2_hash: Option<String>,
}

/// Forecasts of one trajectory retained for plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotCase {
    pub traj_id: usize,
    pub observed: Array3<f32>,
    pub truth: Array3<f32>,
    pub predictions: Vec<Array3<f32>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub cases: Vec<PlotCase>,
}

const MODEL: &str = "model";
const STATIC: &str = "static";
const LINEAR: &str = "linear";

fn summarize(rows: &[MetricRow], method: &str) -> MethodSummary {
    let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method).collect();
    let n = sel.len().max(1) as f64;
    MethodSummary {
        ade: sel.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: sel.iter().map(|r| r.fde).sum::<f64>() / n,
        min_ade: sel.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde: sel.iter().map(|r| r.min_fde).sum::<f64>() / n,
    }
}

/// Identifier assignment used for trajectory `traj` under `seed`.
pub fn evaluation_assignment(seed: u64, traj: usize, entities: usize, pool: crate::identifiers::IdentifierPool) -> Result<IdentifierAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed ^ 0xA55A_A55A, traj as u64));
    sample_assignment(entities, pool, &mut rng)
}

/// Runs the benchmark protocol with any forecaster. Baselines use the same split.
pub fn evaluate_with(
    forecaster: &dyn Forecaster,
    pool: crate::identifiers::IdentifierPool,
    test: &TrajectoryDataset,
    protocol: &Protocol,
) -> Result<Evaluation> {
    if protocol.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if test.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let spec = SplitSpec::new(protocol.observed);
    let total = test.num_frames();
    let horizon = spec.horizon(total)?;
    let scenario = test.config.scenario.to_string();
    let count = protocol.max_trajectories.unwrap_or(test.len()).min(test.len());
    let mut rows = Vec::with_capacity(count * 3);
    let mut cases = Vec::new();
    for (i, traj) in test.trajectories.iter().take(count).enumerate() {
        let (obs, fut) = split_observed(traj, spec)?;
        let truth = fut.positions.view();
        let ids = evaluation_assignment(protocol.seed, i, traj.num_entities(), pool)?;
        let seed = sub_seed(protocol.seed, i as u64);
        let preds = forecaster
            .forecast(traj, &obs, &ids, protocol.k, seed, horizon)
            .map_err(|e| e.context(format!("test trajectory {i}")))?;
        if preds.len() != protocol.k {
            return Err(Error::Shape(format!("forecaster returned {} of {} draws", preds.len(), protocol.k)));
        }
        let views: Vec<ArrayView3<'_, f32>> = preds.iter().map(|p| p.view()).collect();
        let mut a = 0.0;
        let mut f = 0.0;
        for v in &views {
            a += ade(truth, *v)?;
            f += fde(truth, *v)?;
        }
        let (min_ade, min_fde) = min_metrics(truth, &views)?;
        rows.push(MetricRow {
            scenario: scenario.clone(),
            traj_id: i,
            method: MODEL.into(),
            ade: a / protocol.k as f64,
            fde: f / protocol.k as f64,
            min_ade,
            min_fde,
            k: protocol.k,
            seed,
        });
        for (name, pred) in [
            (STATIC, baseline_static(obs.positions.view(), horizon)?),
            (LINEAR, baseline_linear(obs.positions.view(), horizon)?),
        ] {
            let (a, f) = (ade(truth, pred.view())?, fde(truth, pred.view())?);
            rows.push(MetricRow {
                scenario: scenario.clone(),
                traj_id: i,
                method: name.into(),
                ade: a,
                fde: f,
                min_ade: a,
                min_fde: f,
                k: 1,
                seed,
            });
        }
        if cases.len() < protocol.plot_cases {
            cases.push(PlotCase {
                traj_id: i,
                observed: obs.positions.clone(),
                truth: fut.positions.clone(),
                predictions: preds,
            });
        }
    }
    let report = MetricReport {
        scenario,
        k: protocol.k,
        observed: protocol.observed,
        horizon,
        seed: protocol.seed,
        trajectories: count,
        model: summarize(&rows, MODEL),
        static_baseline: summarize(&rows, STATIC),
        linear_baseline: summarize(&rows, LINEAR),
        rows,
        stage1_hash: None,
        stage2_hash: None,
    };
    Ok(Evaluation { report, cases })
}

/// Benchmark protocol for the trained two-stage model.
pub fn evaluate_model(
    stage1: &FirstStage,
    stage2: &SecondStage,
    test: &TrajectoryDataset,
    protocol: &Protocol,
    sampler: &SamplerConfig,
) -> Result<Evaluation> {
    let f = ModelForecaster {
        stage1,
        stage2,
        sampler: sampler.clone(),
    };
    let mut out = evaluate_with(&f, stage1.pool(), test, protocol)?;
    out.report.stage1_hash = Some(stage1.checksum()?);
    out.report.stage2_hash = Some(stage2.checksum()?);
    Ok(out)
}

pub const CSV_HEADER: &str = "scenario,traj_id,method,ade,fde,min_ade,min_fde,K,seed";

pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario, r.traj_id, r.method, r.ade, r.fde, r.min_ade, r.min_fde, r.k, r.seed
        );
    }
    out
}

pub fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(report)).map_err(|e| Error::io(path, e))
}

pub fn write_summary(report: &MetricReport, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        scenario: &'a str,
        k: usize,
        observed: usize,
        horizon: usize,
        seed: u64,
        trajectories: usize,
        model: MethodSummary,
        static_baseline: MethodSummary,
        linear_baseline: MethodSummary,
        stage1_hash: &'a Option<String>,
        stage2_hash: &'a Option<String>,
    }
    let s = Summary {
        scenario: &report.scenario,
        k: report.k,
        observed: report.observed,
        horizon: report.horizon,
        seed: report.seed,
        trajectories: report.trajectories,
        model: report.model,
        static_baseline: report.static_baseline,
        linear_baseline: report.linear_baseline,
        stage1_hash: &report.stage1_hash,
        stage2_hash: &report.stage2_hash,
    };
    std::fs::write(path, serde_json::to_string_pretty(&s)?).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// SVG overlay of the first two coordinates: observed stub, true future and each draw.
pub fn render_svg(case: &PlotCase, title: &str) -> String {
    let (w, h, pad) = (480.0f64, 480.0f64, 24.0f64);
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut collect = |a: &Array3<f32>| {
        for f in 0..a.dim().0 {
            for i in 0..a.dim().1 {
                let y = if a.dim().2 > 1 { a[[f, i, 1]] } else { 0.0 };
                pts.push((a[[f, i, 0]] as f64, y as f64));
            }
        }
    };
    collect(&case.observed);
    collect(&case.truth);
    case.predictions.iter().for_each(&mut collect);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let map = |x: f64, y: f64| {
        (
            pad + (x - x0) / span * (w - 2.0 * pad),
            h - pad - (y - y0) / span * (h - 2.0 * pad),
        )
    };
    let polyline = |a: &Array3<f32>, i: usize, class: &str, color: &str, prefix: Option<&Array3<f32>>| {
        let mut s = String::new();
        if let Some(p) = prefix {
            let last = p.dim().0 - 1;
            let y = if p.dim().2 > 1 { p[[last, i, 1]] } else { 0.0 };
            let (px, py) = map(p[[last, i, 0]] as f64, y as f64);
            let _ = write!(s, "{px:.2},{py:.2} ");
        }
        for f in 0..a.dim().0 {
            let y = if a.dim().2 > 1 { a[[f, i, 1]] } else { 0.0 };
            let (px, py) = map(a[[f, i, 0]] as f64, y as f64);
            let _ = write!(s, "{px:.2},{py:.2} ");
        }
        format!(
            "<polyline class=\"{class}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.trim_end()
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{pad}\" y=\"16\" font-size=\"12\" font-family=\"sans-serif\">{title}</text>\n"
    );
    let n = case.truth.dim().1;
    for i in 0..n {
        svg.push_str(&polyline(&case.observed, i, "observed", "#999999", None));
        for (k, p) in case.predictions.iter().enumerate() {
            svg.push_str(&polyline(p, i, "prediction", PALETTE[k % PALETTE.len()], Some(&case.observed)));
        }
        svg.push_str(&polyline(&case.truth, i, "truth", "#000000", Some(&case.observed)));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `metrics.csv`, `summary.json` and one SVG per retained case.
pub fn emit_plots(report: &MetricReport, cases: &[PlotCase], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join("metrics.csv");
    write_csv(report, &csv)?;
    written.push(csv);
    let summary = dir.join("summary.json");
    write_summary(report, &summary)?;
    written.push(summary);
    for case in cases {
        let path = dir.join(format!("{}_traj{:04}.svg", report.scenario, case.traj_id));
        let title = format!("{} trajectory {} (K={})", report.scenario, case.traj_id, case.predictions.len());
        std::fs::write(&path, render_svg(case, &title)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

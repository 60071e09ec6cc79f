use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use entity_flow::approximator::{train_second_stage, SecondStage, SecondStageOptions};
use entity_flow::config::{resolve_output, RunConfig};
use entity_flow::evaluation::{emit_plots, evaluate_model, MetricReport, PlotCase, Protocol};
use entity_flow::first_stage::{train_first_stage, FirstStage, TrainOptions, WeightSet};
use entity_flow::identifiers::IdentifierAssignment;
use entity_flow::nbody::{generate_dataset, load_dataset, save_dataset, Scenario, ScenarioConfig, SplitCounts, TrajectoryDataset};
use entity_flow::repro::{golden_names, run_golden, GoldenOptions};
use entity_flow::sampler::{manifest, sample_k, IntegratorKind, SamplerConfig};
use entity_flow::types::TrajectorySlice;
use entity_flow::Error;
use ndarray::s;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "entity-flow", version, about = "Two-stage latent flow models for multi-entity trajectories")]
#[command(after_help = "Relative output paths resolve against $ENTITY_FLOW_HOME when it is set.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a particle dataset with train/val/test splits.
    Generate {
        #[arg(long)]
        scenario: String,
        /// `train,val,test` trajectory counts.
        #[arg(long, default_value = "500,100,100")]
        counts: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config whose `data.physics` overrides the scenario defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the autoencoder.
    TrainStage1 {
        #[command(flatten)]
        common: TrainArgs,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the latent flow model on a frozen autoencoder.
    TrainStage2 {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Sample K forecasts for one trajectory.
    Sample {
        #[arg(long)]
        stage2: PathBuf,
        /// First-stage directory; defaults to the one recorded by the second stage.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Dataset split directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        traj: usize,
        /// Observed frames taken from the trajectory.
        #[arg(long, default_value_t = 10)]
        observed: usize,
        /// Total frames, observed plus forecast. Defaults to the trajectory length.
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Benchmark a trained model against the static and linear baselines.
    Evaluate {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Dataset root (its `test` split is used) or a split directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        observed: usize,
        #[arg(long)]
        max_trajectories: Option<usize>,
        #[arg(long, default_value_t = 4)]
        plot_cases: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Render SVG figures from an evaluation directory.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pinned golden checks.
    Golden {
        /// Golden names; all of them when empty.
        names: Vec<String>,
        #[arg(long)]
        list: bool,
        /// Cache for datasets and checkpoints of the training goldens.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Print the desk-scale preset config as YAML.
    DeskConfig {
        #[arg(long, default_value = "spring")]
        scenario: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root with `train` and `val` splits.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_effective_config: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `euler` or `dopri5`.
    #[arg(long, default_value = "euler")]
    integrator: String,
}

impl SamplerArgs {
    fn config(&self) -> Result<SamplerConfig> {
        let integrator: IntegratorKind = self.integrator.parse()?;
        let cfg = SamplerConfig {
            integrator,
            steps: self.steps,
            k: self.k,
            seed: self.seed,
            ..SamplerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn timestamp(no_timestamp: bool) -> Value {
    if no_timestamp {
        Value::Null
    } else {
        json!(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
    }
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    if root.join("meta.json").exists() {
        root.to_path_buf()
    } else {
        root.join(split)
    }
}

fn load_split(root: &Path, split: &str) -> Result<TrajectoryDataset> {
    let dir = split_dir(root, split);
    if !dir.join("meta.json").exists() {
        return Err(usage(format!("no dataset split at {}", dir.display())));
    }
    Ok(load_dataset(&dir)?)
}

fn check_compatible(stage1: &FirstStage, ds: &TrajectoryDataset) -> Result<()> {
    let data = stage1.data();
    if data.spatial_dim != ds.spatial_dim() {
        return Err(Error::Incompatible(format!(
            "spatial dimension: checkpoint has {}, dataset has {}",
            data.spatial_dim,
            ds.spatial_dim()
        ))
        .into());
    }
    if data.properties != ds.properties {
        return Err(Error::Incompatible(format!(
            "property columns: checkpoint has {}, dataset has {}",
            data.properties.len(),
            ds.property_dim()
        ))
        .into());
    }
    if ds.num_entities() > stage1.pool().size() {
        return Err(Error::PoolExhausted {
            entities: ds.num_entities(),
            pool: stage1.pool().size(),
        }
        .into());
    }
    Ok(())
}

fn load_stage1(dir: &Path) -> Result<FirstStage> {
    if !dir.join(entity_flow::first_stage::SIDECAR_FILE).exists() {
        return Err(usage(format!("no first-stage checkpoint at {}", dir.display())));
    }
    Ok(FirstStage::load(dir, WeightSet::Preferred)?)
}

fn load_pair(stage2_dir: &Path, stage1_dir: Option<&PathBuf>) -> Result<(FirstStage, SecondStage)> {
    if !stage2_dir.join(entity_flow::first_stage::SIDECAR_FILE).exists() {
        return Err(usage(format!("no second-stage checkpoint at {}", stage2_dir.display())));
    }
    let side = SecondStage::read_sidecar(stage2_dir)?;
    let s1 = match (stage1_dir, &side.stage1_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(usage("second-stage sidecar names no first stage; pass --stage1")),
    };
    let stage1 = load_stage1(&s1)?;
    let stage2 = SecondStage::load(stage2_dir, &stage1, None)?;
    Ok((stage1, stage2))
}

fn load_config(args: &TrainArgs) -> Result<Option<RunConfig>> {
    let cfg = RunConfig::load(&args.config)?;
    if args.print_effective_config {
        print!("{}", cfg.to_yaml()?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn parse_scenario(name: &str) -> Result<Scenario> {
    Ok(name.parse::<Scenario>()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            scenario,
            counts,
            out,
            seed,
            config,
        } => {
            let scenario = parse_scenario(&scenario)?;
            let counts: SplitCounts = counts.parse()?;
            let physics = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    if cfg.data.scenario != scenario {
                        return Err(usage(format!(
                            "config describes `{}` but --scenario is `{scenario}`",
                            cfg.data.scenario
                        )));
                    }
                    cfg.data.scenario_config()
                }
                None => ScenarioConfig::default_for(scenario),
            };
            let out = resolve_output(&out);
            let splits = generate_dataset(&physics, counts, seed)?;
            let mut summary = Vec::new();
            for ds in &splits {
                let dir = out.join(ds.split.name());
                save_dataset(ds, &dir)?;
                summary.push(json!({
                    "split": ds.split.name(),
                    "dir": dir.display().to_string(),
                    "trajectories": ds.len(),
                    "frames": ds.num_frames(),
                    "entities": ds.num_entities(),
                }));
            }
            println!("{}", serde_json::to_string_pretty(&json!({
                "scenario": scenario.name(),
                "master_seed": seed,
                "desk_scale": counts.is_desk_scale(),
                "splits": summary,
            }))?);
        }
        Command::TrainStage1 { common, resume } => {
            let Some(cfg) = load_config(&common)? else { return Ok(()) };
            let data = required(&common.data, "--data")?;
            let out = resolve_output(required(&common.out, "--out")?);
            let train = load_split(data, "train")?;
            let val = load_split(data, "val").ok();
            if train.config.scenario != cfg.data.scenario {
                return Err(usage(format!(
                    "config is for `{}` but the dataset is `{}`",
                    cfg.data.scenario, train.config.scenario
                )));
            }
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                resume,
                verbose: !common.quiet,
            };
            let (stage, curve) = train_first_stage(&train, val.as_ref(), &cfg.first_stage, &opts)?;
            println!("{}", serde_json::to_string_pretty(&json!({
                "checkpoint": out.display().to_string(),
                "epochs": curve.last().map(|r| r.epoch).unwrap_or(0),
                "final_train_loss": curve.last().map(|r| r.train_loss),
                "final_val_loss": curve.last().and_then(|r| r.val_loss),
                "checksum": stage.checksum()?,
            }))?);
        }
        Command::TrainStage2 { common, stage1 } => {
            let Some(cfg) = load_config(&common)? else { return Ok(()) };
            let s1_dir = required(&stage1, "--stage1")?.clone();
            let data = required(&common.data, "--data")?;
            let out = resolve_output(required(&common.out, "--out")?);
            let stage1 = load_stage1(&s1_dir)?;
            let train = load_split(data, "train")?;
            let val = load_split(data, "val").ok();
            check_compatible(&stage1, &train)?;
            let opts = SecondStageOptions {
                out_dir: Some(out.clone()),
                stage1_dir: Some(fs::canonicalize(&s1_dir).unwrap_or(s1_dir)),
                verbose: !common.quiet,
            };
            let (stage2, curve, freeze) =
                train_second_stage(&stage1, &train, val.as_ref(), &cfg.second_stage.stage_config(), &opts)?;
            println!("{}", serde_json::to_string_pretty(&json!({
                "checkpoint": out.display().to_string(),
                "epochs": curve.last().map(|r| r.epoch).unwrap_or(0),
                "final_train_loss": curve.last().map(|r| r.train_loss),
                "final_val_loss": curve.last().and_then(|r| r.val_loss),
                "stage1_unchanged": freeze.unchanged(),
                "checksum": stage2.checksum()?,
            }))?);
        }
        Command::Sample {
            stage2,
            stage1,
            input,
            traj,
            observed,
            frames,
            sampler,
            out,
            no_timestamp,
        } => {
            let cfg = sampler.config()?;
            let (s1, s2) = load_pair(&stage2, stage1.as_ref())?;
            let ds = load_split(&input, "test")?;
            check_compatible(&s1, &ds)?;
            let trajectory = ds
                .trajectories
                .get(traj)
                .ok_or_else(|| usage(format!("--traj {traj} but the split holds {} trajectories", ds.len())))?;
            let total = frames.unwrap_or(trajectory.num_frames());
            if observed == 0 || observed > trajectory.num_frames() || observed >= total {
                return Err(usage(format!("need 1 <= --observed < --frames, got {observed} and {total}")));
            }
            let slice = TrajectorySlice {
                positions: trajectory.positions.slice(s![..observed, .., ..]).to_owned(),
                properties: trajectory.properties.clone(),
                dt: trajectory.dt,
                start: 0,
            };
            let ids = IdentifierAssignment::sequential(trajectory.num_entities(), s1.pool())?;
            let set = sample_k(&s1, &s2, &slice, &ids, &cfg, total)?;
            let mut man = serde_json::to_value(manifest(&s1, &s2, &cfg, observed, total, &set)?)?;
            man["nfe"] = json!(set.nfe.iter().sum::<usize>() / set.nfe.len().max(1));
            man["traj"] = json!(traj);
            man["identifiers"] = json!(ids.ids());
            man["timestamp"] = timestamp(no_timestamp);
            if no_timestamp {
                man["wall_clock_seconds"] = Value::Null;
            }
            let out = resolve_output(&out);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let forecasts: Vec<_> = set.forecasts.iter().map(|f| &f.positions).collect();
            write_json(&out.join("forecasts.json"), &json!({
                "observed": slice.positions,
                "forecasts": forecasts,
            }))?;
            write_json(&out.join("manifest.json"), &man)?;
            println!("{}", serde_json::to_string_pretty(&man)?);
        }
        Command::Evaluate {
            stage2,
            stage1,
            data,
            observed,
            max_trajectories,
            plot_cases,
            sampler,
            out,
            no_timestamp,
        } => {
            let cfg = sampler.config()?;
            let (s1, s2) = load_pair(&stage2, stage1.as_ref())?;
            let test = load_split(&data, "test")?;
            check_compatible(&s1, &test)?;
            let protocol = Protocol {
                k: cfg.k,
                observed,
                seed: cfg.seed,
                max_trajectories,
                plot_cases,
            };
            let started = std::time::Instant::now();
            let eval = evaluate_model(&s1, &s2, &test, &protocol, &cfg)?;
            let out = resolve_output(&out);
            let written = emit_plots(&eval.report, &[], &out)?;
            write_json(&out.join("report.json"), &eval.report)?;
            write_json(&out.join("cases.json"), &eval.cases)?;
            let mut man = json!({
                "protocol": protocol,
                "sampler": cfg,
                "nfe_per_sample": cfg.steps,
                "stage1_hash": eval.report.stage1_hash,
                "stage2_hash": eval.report.stage2_hash,
                "timestamp": timestamp(no_timestamp),
                "wall_clock_seconds": if no_timestamp { Value::Null } else { json!(started.elapsed().as_secs_f64()) },
            });
            if cfg.integrator == IntegratorKind::Adaptive {
                man["nfe_per_sample"] = Value::Null;
            }
            write_json(&out.join("manifest.json"), &man)?;
            let r = &eval.report;
            println!(
                "{}: K={} over {} trajectories\n  model   ADE {:.6} FDE {:.6} minADE {:.6} minFDE {:.6}\n  static  ADE {:.6} FDE {:.6}\n  linear  ADE {:.6} FDE {:.6}\nwrote {}",
                r.scenario,
                r.k,
                r.trajectories,
                r.model.ade,
                r.model.fde,
                r.model.min_ade,
                r.model.min_fde,
                r.static_baseline.ade,
                r.static_baseline.fde,
                r.linear_baseline.ade,
                r.linear_baseline.fde,
                written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
            );
        }
        Command::Plot { report, out } => {
            let report_path = report.join("report.json");
            if !report_path.exists() {
                return Err(usage(format!("no report.json in {}", report.display())));
            }
            let rep: MetricReport = serde_json::from_str(&fs::read_to_string(&report_path)?)
                .with_context(|| format!("parsing {}", report_path.display()))?;
            let cases_path = report.join("cases.json");
            let cases: Vec<PlotCase> = if cases_path.exists() {
                serde_json::from_str(&fs::read_to_string(&cases_path)?)
                    .with_context(|| format!("parsing {}", cases_path.display()))?
            } else {
                Vec::new()
            };
            let written = emit_plots(&rep, &cases, &resolve_output(&out))?;
            for p in written.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")) {
                println!("{}", p.display());
            }
        }
        Command::Golden {
            names,
            list,
            work_dir,
            json,
            verbose,
        } => {
            if list {
                for n in golden_names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let names: Vec<String> = if names.is_empty() {
                golden_names().into_iter().map(String::from).collect()
            } else {
                names
            };
            let opts = GoldenOptions {
                work_dir: work_dir.map(|d| resolve_output(&d)),
                verbose,
            };
            let mut reports = Vec::new();
            for n in &names {
                let r = run_golden(n, &opts)?;
                println!("{}", r.summary_line());
                reports.push(r);
            }
            if let Some(path) = json {
                write_json(&resolve_output(&path), &reports)?;
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                anyhow::bail!("{failed} of {} goldens failed", reports.len());
            }
        }
        Command::DeskConfig { scenario } => {
            let scenario = parse_scenario(&scenario)?;
            print!("{}", RunConfig::desk(scenario).to_yaml()?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_usage) || e.downcast_ref::<clap::Error>().is_some());
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

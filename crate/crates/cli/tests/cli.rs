use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
seed: 3
data:
  scenario: spring
  counts: {train: 4, val: 2, test: 2}
  observed: 10
first_stage:
  training: {epochs: 2, batch_size: 16, seed: 3}
second_stage:
  network: {hidden: 16, layers: 1, heads: 2, mlp_ratio: 2}
  training: {epochs: 1, batch_size: 4, seed: 3}
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entity-flow"))
        .args(args)
        .env_remove("ENTITY_FLOW_HOME")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for split in ["train", "val", "test"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(split)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries {
            files.push((e.display().to_string().replace(p(dir), ""), fs::read(&e).unwrap()));
        }
    }
    files
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--scenario", "charged", "--counts", "3,2,2", "--seed", "11", "--out", p(d)]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&run(&["generate", "--scenario", "plasma", "--out", p(&out)])), 2);
    assert_eq!(code(&run(&["generate", "--scenario", "spring", "--counts", "1,2", "--out", p(&out)])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["golden", "no-such-golden"])), 2);
    let cfg = tmp.path().join("c.yaml");
    fs::write(&cfg, TINY).unwrap();
    let stage2 = run(&["train-stage2", "--config", p(&cfg), "--data", p(&out), "--out", p(&out)]);
    assert_eq!(code(&stage2), 2);
    assert!(String::from_utf8_lossy(&stage2.stderr).contains("--stage1"));
    fs::write(&cfg, format!("{TINY}bogus: 1\n")).unwrap();
    assert_eq!(code(&run(&["train-stage1", "--config", p(&cfg), "--print-effective-config"])), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("report.json"), "{ not json").unwrap();
    let out = run(&["plot", "--report", p(tmp.path()), "--out", p(&tmp.path().join("figs"))]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn effective_config_is_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.yaml");
    fs::write(&cfg, TINY).unwrap();
    let text = ok(&["train-stage1", "--config", p(&cfg), "--print-effective-config"]);
    for key in ["physics:", "spring_constant:", "ema_decay:", "pool_size:", "integrator:"] {
        assert!(text.contains(key), "missing `{key}` in\n{text}");
    }
    let desk = ok(&["desk-config"]);
    assert!(desk.contains("train: 500"));
}

#[test]
fn golden_list_names_every_golden() {
    let names = ok(&["golden", "--list"]);
    assert_eq!(names.lines().count(), 11);
    let line = ok(&["golden", "identifier-counting", "euler-closed-form"]);
    assert_eq!(line.lines().filter(|l| l.contains("PASS")).count(), 2, "{line}");
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.yaml");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let s1 = root.join("s1");
    let s2 = root.join("s2");
    ok(&["generate", "--scenario", "spring", "--counts", "4,2,2", "--seed", "3", "--out", p(&data)]);

    ok(&["train-stage1", "--config", p(&cfg), "--data", p(&data), "--out", p(&s1), "--quiet"]);
    let curve = fs::read_to_string(s1.join("curve.csv")).unwrap();
    let epochs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);

    // Resuming with a longer schedule continues the epoch numbering.
    let longer = root.join("longer.yaml");
    fs::write(&longer, TINY.replace("epochs: 2", "epochs: 3")).unwrap();
    ok(&["train-stage1", "--config", p(&longer), "--data", p(&data), "--out", p(&s1), "--quiet", "--resume"]);
    let curve = fs::read_to_string(s1.join("curve.csv")).unwrap();
    let epochs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"]);

    let summary: Value = serde_json::from_str(&ok(&[
        "train-stage2", "--config", p(&cfg), "--data", p(&data), "--stage1", p(&s1), "--out", p(&s2), "--quiet",
    ]))
    .unwrap();
    assert_eq!(summary["stage1_unchanged"], Value::Bool(true));

    let sample_args = |out: &Path| {
        vec![
            "sample".to_string(), "--stage2".into(), p(&s2).into(), "--input".into(), p(&data.join("test")).into(),
            "--observed".into(), "10".into(), "--k".into(), "2".into(), "--steps".into(), "10".into(),
            "--out".into(), p(out).into(), "--no-timestamp".into(),
        ]
    };
    let (o1, o2) = (root.join("sample1"), root.join("sample2"));
    for o in [&o1, &o2] {
        let args = sample_args(o);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let man: Value = serde_json::from_str(&fs::read_to_string(o1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["nfe"], 10);
    for f in ["manifest.json", "forecasts.json"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f} not reproducible");
    }
    let forecasts: Value = serde_json::from_str(&fs::read_to_string(o1.join("forecasts.json")).unwrap()).unwrap();
    assert_eq!(forecasts["forecasts"].as_array().unwrap().len(), 2);

    let eval = root.join("eval");
    ok(&[
        "evaluate", "--stage2", p(&s2), "--data", p(&data), "--k", "5", "--steps", "4", "--out", p(&eval),
        "--no-timestamp",
    ]);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for col in ["ade", "fde", "min_ade", "min_fde", "K"] {
        assert!(header.contains(&col), "no `{col}` column in {header:?}");
    }
    assert!(csv.lines().skip(1).any(|l| l.contains(",model,")), "no model rows");

    let plots = root.join("plots");
    let listed = ok(&["plot", "--report", p(&eval), "--out", p(&plots)]);
    assert!(listed.lines().count() >= 1, "no figures written");
    for line in listed.lines() {
        assert!(fs::read_to_string(line).unwrap().starts_with("<svg"), "{line} is not an SVG");
    }
}

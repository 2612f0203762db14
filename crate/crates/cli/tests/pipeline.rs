use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST: [&str; 6] = ["--chains", "2", "--iter", "600", "--seed", "11"];

fn reefgauge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reefgauge"))
        .args(args)
        .env_remove("REEFGAUGE_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fitted {
    _dir: TempDir,
    data: PathBuf,
    indicators: PathBuf,
    fit: PathBuf,
}

fn synth_and_fit() -> Fitted {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("input");
    let out = reefgauge(&["synth", "--out", s(&input), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = input.join("deployments.csv");
    let indicators = input.join("indicators.json");
    let fit = dir.path().join("fit");
    let mut args = vec!["fit", "--data", s(&data), "--indicators", s(&indicators), "--out", s(&fit)];
    args.extend(FAST);
    let out = reefgauge(&args);
    assert!(matches!(out.status.code(), Some(0 | 4)), "{}", String::from_utf8_lossy(&out.stderr));
    Fitted { data: data.clone(), indicators: indicators.clone(), fit, _dir: dir }
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(reefgauge(&["synth", "--out", s(&a), "--seed", "9"]).status.success());
    assert!(reefgauge(&["synth", "--out", s(&b), "--seed", "9"]).status.success());
    assert_eq!(read_tree(&a), read_tree(&b));
    let csv = fs::read_to_string(a.join("deployments.csv")).unwrap();
    assert!(csv.starts_with("site,year,station_id,species_code,maxn,usable\n"));
}

#[test]
fn fit_summary_and_report() {
    let f = synth_and_fit();
    let summary = fs::read_to_string(f.fit.join("summary.csv")).unwrap();
    let first: Vec<&str> = summary.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["Parameter", "exp(beta0)", "sigma_S", "sigma_Y", "sigma_SY", "sigma_B", "phi"]);
    assert!(f.fit.join("observations.csv").exists());

    let report = f.fit.parent().unwrap().join("report");
    let draws = f.fit.join("draws");
    let out = reefgauge(&["report", "--draws", s(&draws), "--out", s(&report), "--baseline-year", "2018"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["status.json", "style1_median.csv", "style2_interval.csv", "style3_credibility.csv"] {
        assert!(report.join(name).exists(), "{name} missing");
    }
    let status: serde_json::Value = serde_json::from_slice(&fs::read(report.join("status.json")).unwrap()).unwrap();
    assert_eq!(status["baseline"], 2018);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("excluded (no baseline observation): S5"), "{stdout}");

    let again = f.fit.parent().unwrap().join("report2");
    reefgauge(&["report", "--draws", s(&draws), "--out", s(&again), "--baseline-year", "2018"]);
    assert_eq!(read_tree(&report), read_tree(&again));

    let out = reefgauge(&["report", "--draws", s(&draws), "--out", s(&again), "--baseline-year", "1999"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fit_is_reproducible() {
    let a = synth_and_fit();
    let b = synth_and_fit();
    assert_eq!(read_tree(&a.fit), read_tree(&b.fit));
}

#[test]
fn simulate_resumes_from_checkpoints() {
    let f = synth_and_fit();
    let root = f.fit.parent().unwrap();
    let sim = root.join("sim");
    let draws = f.fit.join("draws");
    let args = |out: &Path| -> Vec<String> {
        [
            "simulate", "--draws", s(&draws), "--data", s(&f.data), "--indicators", s(&f.indicators), "--out", s(out),
            "--rho", "0.25,1", "--alpha", "5", "--replicates", "2", "--chains", "1", "--iter", "300", "--seed", "4",
        ]
        .map(String::from)
        .to_vec()
    };
    let run = |out: &Path| {
        let a = args(out);
        let out = reefgauge(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&sim);
    let first = fs::read(sim.join("power.csv")).unwrap();
    let header = String::from_utf8_lossy(&first).lines().next().unwrap().to_string();
    assert_eq!(header, "rho,alpha,completed,failed,mean_power,p_poor,p_fair,p_good,p_very good");
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 3);

    let checkpoints: Vec<_> = fs::read_dir(sim.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(checkpoints.len(), 4);
    fs::remove_file(&checkpoints[0]).unwrap();
    fs::remove_file(&checkpoints[2]).unwrap();
    run(&sim);
    assert_eq!(fs::read(sim.join("power.csv")).unwrap(), first);

    let fresh = root.join("fresh");
    run(&fresh);
    assert_eq!(fs::read(fresh.join("power.csv")).unwrap(), first);
    assert_eq!(fs::read(fresh.join("category_curve.csv")).unwrap(), fs::read(sim.join("category_curve.csv")).unwrap());
}

#[test]
fn simulate_default_grid_has_eighteen_cells() {
    let f = synth_and_fit();
    let sim = f.fit.parent().unwrap().join("sim");
    let draws = f.fit.join("draws");
    let out = reefgauge(&[
        "simulate", "--draws", s(&draws), "--data", s(&f.data), "--indicators", s(&f.indicators), "--out", s(&sim),
        "--replicates", "1", "--chains", "1", "--iter", "120", "--seed", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("grid: 18 cells x 1 replicates = 18 fits"), "{stdout}");
    let csv = fs::read_to_string(sim.join("power.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);
}

#[test]
fn simulate_requires_seed() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("none");
    let out = reefgauge(&["simulate", "--draws", s(&p), "--data", s(&p), "--indicators", s(&p), "--out", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = reefgauge(&["fit", "--data", s(&missing), "--indicators", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn malformed_scheme_is_a_data_error() {
    let f = synth_and_fit();
    let scheme = f.fit.parent().unwrap().join("scheme.json");
    fs::write(&scheme, "{ not json").unwrap();
    let draws = f.fit.join("draws");
    let out = reefgauge(&["report", "--draws", s(&draws), "--out", s(&f.fit), "--scheme", s(&scheme)]);
    assert_eq!(out.status.code(), Some(3));
}

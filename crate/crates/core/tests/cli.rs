use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use freeknot::cli::{read_columns, Manifest};

fn freeknot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freeknot")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = freeknot(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn simulate(dir: &Path, n: usize) {
    ok(&[
        "simulate",
        "--n",
        &n.to_string(),
        "--covariates",
        "2",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_data_file_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let out = freeknot(&["fit", "--data", "/no/such/input.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/input.csv"));
}

#[test]
fn bad_flag_and_bad_config_exit_2() {
    assert_eq!(freeknot(&["fit", "--no-such-flag"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sampler]\niteratons = 4\n").unwrap();
    let out = freeknot(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteratons"));
}

#[test]
fn zero_iterations_write_empty_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, 40);
    let fit = tmp.path().join("fit");
    ok(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--iterations",
        "0",
        "--burn-in",
        "0",
        "--out",
        fit.to_str().unwrap(),
    ]);
    let (names, cols) = read_columns(&fit.join("draws/knots.csv")).unwrap();
    assert_eq!(names.len(), 5 * 2 + 2 * 2);
    assert!(cols.iter().all(Vec::is_empty));
    assert!(fit.join("grids/heatmap_surface.csv").exists());
}

#[test]
fn fit_rerun_from_config_is_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, 60);
    let first = tmp.path().join("a");
    ok(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--surface-knots",
        "3",
        "--additive-knots",
        "1",
        "--iterations",
        "60",
        "--burn-in",
        "10",
        "--workers",
        "1",
        "--out",
        first.to_str().unwrap(),
    ]);
    let second = tmp.path().join("b");
    ok(&[
        "fit",
        "--config",
        first.join("config.toml").to_str().unwrap(),
        "--workers",
        "3",
        "--out",
        second.to_str().unwrap(),
    ]);
    let (ma, mb) = (manifest(&first), manifest(&second));
    assert_eq!(ma, mb);
    assert!(ma.outputs.len() > 10);
    for entry in &ma.outputs {
        let a = fs::read(first.join(&entry.file)).unwrap();
        let b = fs::read(second.join(&entry.file)).unwrap();
        assert!(a == b, "{} differs", entry.file);
    }
}

#[test]
fn numeric_outputs_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, 50);
    for file in ["data.csv", "f_train.csv", "eval.csv"] {
        let text = fs::read_to_string(sim.join(file)).unwrap();
        let mut rebuilt = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                rebuilt.push_str(line);
            } else {
                let vals: Vec<String> = line.split(',').map(|f| f.parse::<f64>().unwrap().to_string()).collect();
                rebuilt.push_str(&vals.join(","));
            }
            rebuilt.push('\n');
        }
        assert_eq!(rebuilt, text, "{file}");
    }
    let truth = fs::read_to_string(sim.join("truth.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&truth).unwrap();
    assert_eq!(format!("{}\n", serde_json::to_string_pretty(&value).unwrap()), truth);
}

#[test]
fn cv_reports_one_entry_per_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, 100);
    let cv = tmp.path().join("cv");
    ok(&[
        "cv",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--responses",
        "y1",
        "--surface-knots",
        "2",
        "--additive-knots",
        "1",
        "--iterations",
        "40",
        "--burn-in",
        "10",
        "--folds",
        "5",
        "--out",
        cv.to_str().unwrap(),
    ]);
    let report: freeknot::evaluation::LpdsReport =
        serde_json::from_str(&fs::read_to_string(cv.join("lpds.json")).unwrap()).unwrap();
    assert_eq!(report.fold_log_pd.len(), 5);
    assert_eq!(report.fold_sizes, vec![20; 5]);
    assert!(report.fold_log_pd.iter().all(|v| v.is_finite()));
    let avg = report.fold_log_pd.iter().sum::<f64>() / 5.0;
    assert!((report.mean - avg).abs() < 1e-12);
}

#[test]
fn diagnose_iid_draws_gives_unit_inefficiency() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
    let mut csv = String::from("a,b,c\n");
    for _ in 0..20_000 {
        let v: Vec<String> = (0..3).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x.to_string()).collect();
        csv.push_str(&v.join(","));
        csv.push('\n');
    }
    let draws = tmp.path().join("iid.csv");
    fs::write(&draws, csv).unwrap();
    let out = tmp.path().join("diag");
    ok(&["diagnose", draws.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let ifs: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(ifs.len(), 3);
    assert!(ifs.iter().all(|v| (0.9..=1.2).contains(v)), "{ifs:?}");
}

#[test]
fn diagnose_reads_a_fit_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, 50);
    let fit = tmp.path().join("fit");
    ok(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--responses",
        "y1",
        "--surface-knots",
        "2",
        "--additive-knots",
        "0",
        "--iterations",
        "60",
        "--burn-in",
        "5",
        "--out",
        fit.to_str().unwrap(),
    ]);
    let diag = tmp.path().join("diag");
    ok(&["diagnose", fit.to_str().unwrap(), "--out", diag.to_str().unwrap()]);
    let text = fs::read_to_string(diag.join("diagnostics.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("knots,s0_x1,")));
    assert!(text.lines().any(|l| l.starts_with("sigma,")));
}

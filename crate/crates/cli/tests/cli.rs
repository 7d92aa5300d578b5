use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relpos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relpos")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn short_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    fs::write(&path, "[trajectory]\nduration = 3.0\n").unwrap();
    path.to_str().unwrap().to_string()
}

fn simulate(dir: &Path, out: &str, trials: &str) -> Output {
    let config = short_config(dir);
    let out = dir.join(out);
    relpos(&["simulate", "--config", &config, "--trials", trials, "--seed", "42", "--out", out.to_str().unwrap()])
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn print_config_echoes_the_default_noise_table() {
    let out = relpos(&["simulate", "--print-config"]);
    assert_eq!(code(&out), 0);
    let table: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
    let expect = [
        ("magnetometer_std", 1.0),
        ("gyro_std", 0.001),
        ("accel_std", 0.01),
        ("distance_std", 0.1),
        ("initial_position_std", 0.8),
        ("initial_velocity_std", 0.1),
        ("initial_attitude_std", 0.001),
        ("imu_rate_hz", 100.0),
        ("range_rate_hz", 10.0),
        ("rpe_rate_hz", 10.0),
        ("gamma", 100.0),
    ];
    for (key, value) in expect {
        assert_eq!(table[key].as_float(), Some(value), "{key}");
    }
    assert_eq!(table["window_size"].as_integer(), Some(20));
}

#[test]
fn same_seed_gives_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "a", "2")), 0);
    assert_eq!(code(&simulate(dir.path(), "b", "2")), 0);
    let a = fs::read(dir.path().join("a/rmse.csv")).unwrap();
    let b = fs::read(dir.path().join("b/rmse.csv")).unwrap();
    assert_eq!(a, b);

    let rows = read_rows(&dir.path().join("a/rmse.csv"));
    assert_eq!(rows.len(), 2 * 4);
    let names: Vec<&str> = rows[..4].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["proposed", "vanilla", "ekf", "iekf"]);
    assert!(dir.path().join("a/traces/trial_0001.json").exists());

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/summary.json")).unwrap()).unwrap();
    let proposed = summary["estimators"][0]["mean_rmse_m"].as_f64().unwrap();
    for r in summary["reductions"].as_array().unwrap() {
        let name = r["baseline"].as_str().unwrap();
        let base = summary["estimators"].as_array().unwrap().iter().find(|e| e["estimator"] == name).unwrap()
            ["mean_rmse_m"]
            .as_f64()
            .unwrap();
        let expected = (base - proposed) / base;
        assert!((r["reduction"].as_f64().unwrap() - expected).abs() < 1e-15);
    }
    assert!(summary["warning"].is_null());
}

#[test]
fn estimator_subset_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path());
    let out = dir.path().join("sub");
    let run = relpos(&[
        "simulate", "--config", &config, "--trials", "1", "--estimators", "ekf,proposed", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let rows = read_rows(&out.join("rmse.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["proposed", "ekf"]);

    assert_eq!(code(&relpos(&["simulate", "--config", "/no/such/file.toml"])), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "gyro_stdd = 1.0\n").unwrap();
    assert_eq!(code(&relpos(&["simulate", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&relpos(&["simulate", "--estimators", "kalman", "--trials", "1"])), 2);
    assert_eq!(code(&relpos(&["simulate", "--trials", "0"])), 2);
    assert_eq!(code(&relpos(&["simulate", "--no-such-flag"])), 2);
}

#[test]
fn plotdata_tables_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "run", "3")), 0);
    let run = dir.path().join("run");
    assert_eq!(code(&relpos(&["plotdata", "--run", run.to_str().unwrap()])), 0);

    let boxes = read_rows(&run.join("boxplot.csv"));
    assert_eq!(boxes.len(), 4);

    let trace: serde_json::Value = serde_json::from_slice(&fs::read(run.join("traces/trial_0000.json")).unwrap()).unwrap();
    let sigmas = trace["outcomes"][0]["trace"]["sigmas"].as_array().unwrap();
    let rows = read_rows(&run.join("error_trace.csv"));
    assert_eq!(rows.len(), sigmas.len());
    let norms = read_rows(&run.join("error_norm.csv"));
    for (k, row) in rows.iter().enumerate() {
        let v: Vec<f64> = row.iter().map(|s| s.parse().unwrap()).collect();
        for i in 0..3 {
            assert_eq!(v[4 + i], 3.0 * sigmas[k][i].as_f64().unwrap());
        }
        let norm: f64 = norms[k][1].parse().unwrap();
        assert!((norm - (v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt()).abs() <= 1e-15 * norm.max(1.0));
    }
    let hist = read_rows(&run.join("timing_hist.csv"));
    let counted: usize = hist.iter().map(|r| r[3].parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 3 * 4);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&relpos(&["plotdata", "--run", empty.to_str().unwrap()])), 2);
}

fn write_trace(path: &Path, rows: impl Iterator<Item = (f64, [f64; 3])>) {
    let mut text = String::from("t,x,y,z\n");
    for (t, r) in rows {
        text += &format!("{t},{},{},{}\n", r[0], r[1], r[2]);
    }
    fs::write(path, text).unwrap();
}

#[test]
fn check_reports_planar_deficiency() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("planar.csv");
    write_trace(
        &path,
        (0..60).map(|k| {
            let t = 0.1 * k as f64;
            (t, [3.0 + (0.7 * t).sin(), 2.0 * (0.4 * t).cos(), 0.0])
        }),
    );
    let out = relpos(&["check", "--trace", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let verdicts: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(verdicts.len(), 60 - 20 + 1);
    assert!(verdicts.iter().all(|v| *v == "deficient(4)"), "{verdicts:?}");
}

#[test]
fn check_finds_random_trajectories_observable() {
    let out = relpos(&["check", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let verdicts: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let observable = verdicts.iter().filter(|v| **v == "observable").count();
    assert!(observable as f64 >= 0.95 * verdicts.len() as f64, "{observable} of {}", verdicts.len());
}

#[test]
fn check_rejects_empty_or_malformed_traces() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "t,x,y,z\n").unwrap();
    assert_eq!(code(&relpos(&["check", "--trace", empty.to_str().unwrap()])), 2);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t,x,y,z\n0,1,2\n").unwrap();
    assert_eq!(code(&relpos(&["check", "--trace", bad.to_str().unwrap()])), 2);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dlfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlfm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dlfm")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_rff_config(iterations: usize) -> String {
    format!(
        r#"
model = "dlfm-rff"
seed = 3
checkpoint_every = 5

[data]
source = "toy"

[architecture]
hidden_dims = [2]
n_rf = 5

[train]
iterations = {iterations}
learning_rate = 0.01
n_mc_schedule = [[0, 1]]
freeze_variational_until = 0
freeze_hyperparams_until = 0
batch_size = 64
"#
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn trace_rows(path: &Path) -> Vec<(usize, u64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse::<f64>().unwrap().to_bits())
        })
        .collect()
}

#[test]
fn gen_toy_is_deterministic_and_noise_free_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dlfm(&["gen-toy", "--seed", "7", "--out", "a"], d));
    ok(&dlfm(&["gen-toy", "--seed", "7", "--out", "b"], d));
    ok(&dlfm(&["gen-toy", "--seed", "8", "--out", "c"], d));
    let a = fs::read(d.join("a/data.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/data.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c/data.csv")).unwrap());
    assert_eq!(fs::read(d.join("a/split.json")).unwrap(), fs::read(d.join("b/split.json")).unwrap());
    let rows = csv::Reader::from_path(d.join("a/data.csv")).unwrap().records().count();
    assert_eq!(rows, 1000);

    ok(&dlfm(&["gen-toy", "--noise-var", "0", "--out", "clean"], d));
    let mut r = csv::Reader::from_path(d.join("clean/data.csv")).unwrap();
    let cfg = dlfm::data::ToyConfig::default();
    for rec in r.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let y: f64 = rec[1].parse().unwrap();
        let f1 = dlfm::data::toy_response(t, cfg.gamma1);
        let f2 = dlfm::data::toy_response(f1, cfg.gamma2);
        assert!((y - f2).abs() < 1e-12, "t={t}: {y} vs {f2}");
    }
}

#[test]
fn train_writes_artifacts_and_one_trace_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), small_rff_config(500)).unwrap();
    ok(&dlfm(&["train", "--config", "run.toml", "--out", "run"], d));
    for f in ["checkpoint.json", "trace.csv", "split.json", "config.toml", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let trace = trace_rows(&d.join("run/trace.csv"));
    assert_eq!(trace.len(), 500);
    assert!(trace.iter().enumerate().all(|(i, (it, _))| *it == i));
    assert!(d.join("run/checkpoints/iter_5.json").exists());
    let manifest = read_json(&d.join("run/manifest.json"));
    assert_eq!(manifest["model"], "dlfm-rff");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["iterations"], 500);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn identical_seeds_give_identical_runs_and_resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), small_rff_config(20)).unwrap();
    ok(&dlfm(&["train", "--config", "run.toml", "--out", "r1"], d));
    ok(&dlfm(&["train", "--config", "run.toml", "--out", "r2"], d));
    let c1 = fs::read(d.join("r1/checkpoint.json")).unwrap();
    assert_eq!(c1, fs::read(d.join("r2/checkpoint.json")).unwrap());
    let t1 = trace_rows(&d.join("r1/trace.csv"));
    assert_eq!(t1, trace_rows(&d.join("r2/trace.csv")));

    ok(&dlfm(&["train", "--config", "run.toml", "--out", "r1", "--resume", "r1/checkpoints/iter_10.json"], d));
    assert_eq!(fs::read(d.join("r1/checkpoint.json")).unwrap(), c1);
    let resumed = trace_rows(&d.join("r1/trace.csv"));
    assert_eq!(resumed, t1);
    assert_eq!(read_json(&d.join("r1/manifest.json"))["start_iteration"], 10);

    ok(&dlfm(&["train", "--config", "run.toml", "--out", "r3", "--seed", "4"], d));
    assert_ne!(fs::read(d.join("r3/checkpoint.json")).unwrap(), c1);
}

#[test]
fn predict_then_eval_matches_direct_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), small_rff_config(10)).unwrap();
    ok(&dlfm(&["gen-toy", "--seed", "3", "--out", "toy"], d));
    ok(&dlfm(&["train", "--config", "run.toml", "--out", "run"], d));
    ok(&dlfm(
        &["predict", "--checkpoint", "run/checkpoint.json", "--data", "toy/data.csv", "--out", "pred.csv", "--samples", "7"],
        d,
    ));
    ok(&dlfm(
        &["eval", "--predictions", "pred.csv", "--data", "toy/data.csv", "--manifest", "toy/split.json", "--out", "m1.json"],
        d,
    ));
    ok(&dlfm(
        &[
            "eval", "--checkpoint", "run/checkpoint.json", "--data", "toy/data.csv", "--manifest", "toy/split.json", "--out",
            "m2.json", "--samples", "7",
        ],
        d,
    ));
    let (m1, m2) = (read_json(&d.join("m1.json")), read_json(&d.join("m2.json")));
    let keys: Vec<&String> = m1.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["extrap_test", "impute_test", "train"]);
    for k in keys {
        for metric in ["rmse", "nmse", "mnll"] {
            let a = m1[k]["aggregate"][metric].as_f64().unwrap();
            let b = m2[k]["aggregate"][metric].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{k}.{metric}: {a} vs {b}");
        }
        assert_eq!(m1[k]["aggregate"]["count"], m2[k]["aggregate"]["count"]);
    }
}

#[test]
fn exact_gp_interpolates_its_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("x_0,y_0\n");
    for i in 0..30 {
        let x = i as f64 / 10.0;
        csv += &format!("{x},{}\n", (2.0 * x).sin());
    }
    fs::write(d.join("data.csv"), csv).unwrap();
    let cfg = r#"
model = "exact-gp"
[data]
source = "csv"
path = "data.csv"
inputs = ["x_0"]
outputs = ["y_0"]
[gp_init]
noise = 1e-5
[train]
iterations = 0
"#;
    fs::write(d.join("gp.toml"), cfg).unwrap();
    ok(&dlfm(&["train", "--config", "gp.toml", "--out", "gp"], d));
    ok(&dlfm(&["eval", "--checkpoint", "gp/checkpoint.json", "--data", "data.csv", "--out", "m.json"], d));
    let m = read_json(&d.join("m.json"));
    let nmse = m["all"]["aggregate"]["nmse"].as_f64().unwrap();
    assert!(nmse < 1e-4, "{nmse}");
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "model = \"dlfm-rff\"\n[architecture]\nn_rff = 3\n").unwrap();
    let out = dlfm(&["train", "--config", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_rff"));

    assert_eq!(dlfm(&["train"], d).status.code(), Some(1));
    assert_eq!(dlfm(&["no-such-command"], d).status.code(), Some(1));
    assert_eq!(dlfm(&["--help"], d).status.code(), Some(0));

    fs::write(d.join("run.toml"), small_rff_config(2)).unwrap();
    ok(&dlfm(&["train", "--config", "run.toml", "--out", "run"], d));
    let text = fs::read_to_string(d.join("run/checkpoint.json")).unwrap();
    fs::write(d.join("old.json"), text.replacen("\"version\":1", "\"version\":0", 1)).unwrap();
    ok(&dlfm(&["gen-toy", "--out", "toy"], d));
    let out = dlfm(&["predict", "--checkpoint", "old.json", "--data", "toy/data.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 0"));
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("x_0,y_0\n");
    for i in 0..5 {
        csv += &format!("{i},{}\n", if i % 2 == 0 { 1e200 } else { -1e200 });
    }
    fs::write(d.join("data.csv"), csv).unwrap();
    let cfg = r#"
model = "exact-gp"
standardize_y = false
[data]
source = "csv"
path = "data.csv"
inputs = ["x_0"]
outputs = ["y_0"]
[train]
iterations = 3
"#;
    fs::write(d.join("gp.toml"), cfg).unwrap();
    let out = dlfm(&["train", "--config", "gp.toml", "--out", "gp"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("x_0,x_1,x_2,x_3,y_0\n");
    for i in 0..400 {
        let x: Vec<f64> = (0..4).map(|k| ((i * (k + 3)) % 17) as f64 / 8.0).collect();
        csv += &format!("{},{},{},{},{}\n", x[0], x[1], x[2], x[3], (2.0 * x[0]).sin());
    }
    fs::write(d.join("data.csv"), csv).unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let mut cfg: toml::Table = toml::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let train = cfg.get_mut("train").unwrap().as_table_mut().unwrap();
        train.insert("iterations".into(), 2.into());
        if let Some(arch) = cfg.get_mut("architecture").and_then(|a| a.as_table_mut()) {
            arch.insert("predict_samples".into(), 2.into());
        }
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let local = d.join(format!("{name}.toml"));
        fs::write(&local, toml::to_string(&cfg).unwrap()).unwrap();
        ok(&dlfm(&["train", "--config", local.to_str().unwrap(), "--out", &name], d));
        assert_eq!(trace_rows(&d.join(&name).join("trace.csv")).len(), 2, "{name}");
        seen += 1;
    }
    assert!(seen >= 4);
}

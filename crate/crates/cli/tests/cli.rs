use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gs4(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gs4")).args(args).env_remove("GS4_THREADS").output().unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_owned()
}

const TINY: &str = r#"{
  "train": { "epochs": 2, "warmup_epochs": 0 },
  "data": { "size": 40, "seq_len": 1024 }
}"#;

#[test]
fn profile_reports_constant_params_and_linear_macs() {
    let o = gs4(&["profile", "--d", "128", "--sweep-nd", "1..10"]);
    assert_eq!(o.status.code(), Some(0));
    let (out, _) = text(&o);
    let rows: Vec<Vec<u64>> =
        out.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        assert_eq!(r[1], 32_768);
        assert_eq!(r[2], r[0] * rows[0][2]);
    }
}

#[test]
fn profile_marks_indivisible_lengths() {
    let o = gs4(&["profile", "--sweep-nd", "4..6", "--seq-len", "12000"]);
    let (out, _) = text(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n_d,r,params,macs");
    assert!(lines[1].starts_with("4,3000,"));
    assert!(lines[2].starts_with("5,2400,"));
    assert!(lines[3].starts_with("6,2000,"));
    assert_eq!(gs4(&["profile", "--sweep-nd", "3..1"]).status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let o = gs4(&["gradcheck", "--seed", "7"]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    assert!(out.contains("max relative error"));
    assert_eq!(gs4(&["gradcheck", "--seed", "7", "--tol", "1e-30"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "model": { "gsl": { "kapa": 0.1 } } }"#);
    let out = dir.path().join("run");
    let o = gs4(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(2));
    assert!(err.contains("model.gsl"), "{err}");
    assert!(err.contains("kapa"), "{err}");
    assert!(!out.exists());
}

#[test]
fn invalid_values_and_presets_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "model": { "gsl": { "epsilon": 2.0 } } }"#);
    let out = dir.path().join("run");
    let o = gs4(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = gs4(&["train", "--preset", "huge", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gs4(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn thread_env_fallback_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_gs4"))
        .args(["profile", "--sweep-nd", "1..1"])
        .env("GS4_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_gs4"))
        .args(["profile", "--sweep-nd", "1..1"])
        .env("GS4_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn diverging_training_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "train": { "epochs": 2, "warmup_epochs": 0, "lr": 1e300 }, "data": { "size": 20, "seq_len": 1024 } }"#,
    );
    let out = dir.path().join("run");
    let o = gs4(&["train", "--preset", "desk", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(3), "{err}");
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = gs4(&["--threads", "1", "train", "--preset", "desk", "--config", &cfg, "--seed", "5", "--out", run_s]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    for f in ["config.json", "model.gs4m", "history.csv", "metrics.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,lr,train_loss,val_loss,val_metric");
    assert_eq!(history.lines().count(), 3);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 5);
    assert_eq!(echoed["model"]["d_model"], 8);

    let eval_dir = dir.path().join("eval");
    let o = gs4(&["eval", "--run", run_s, "--out", eval_dir.to_str().unwrap(), "--adjacency"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), fs::read(eval_dir.join("metrics.json")).unwrap());
    let delta = fs::read_to_string(eval_dir.join("delta.csv")).unwrap();
    assert!(delta.starts_with("class_a,class_b,delta_mean,delta_std"));

    let again = dir.path().join("again");
    let o = gs4(&["train", "--config", run.join("config.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    assert_eq!(fs::read(run.join("model.gs4m")).unwrap(), fs::read(again.join("model.gs4m")).unwrap());
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), fs::read(again.join("metrics.json")).unwrap());

    let adj = dir.path().join("adj");
    let o = gs4(&["export-adj", "--run", run_s, "--records", "0,2", "--out", adj.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    let n_csv = fs::read_dir(&adj).unwrap().count();
    assert_eq!(n_csv, 2 * 128);
    let o = gs4(&["export-adj", "--run", run_s, "--records", "999", "--out", adj.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_feeds_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corr.bsg1");
    let cfg = write_config(dir.path(), TINY);
    let o = gs4(&["gen-data", "--preset", "desk", "--config", &cfg, "--size", "30", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    assert_eq!(graphs4mer::data::read_bsg1(&data).unwrap().len(), 30);
    let run = dir.path().join("run");
    let o = gs4(&[
        "train",
        "--preset",
        "desk",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["data_path"], data.to_str().unwrap());
}

use std::path::Path;
use std::process::{Command, Output};

fn replan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("stderr ends with JSON")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "seed = 9\n[screening]\nmax_reduced_dims = 2\n[grid]\nnodes = 2\n[sweep]\nhistogram_bins = 4\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = out_dir.to_string_lossy().into_owned();
    let base = ["--config", cfg.as_str(), "--out", out.as_str()];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let o = replan(&args);
        assert!(o.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };

    assert!(run(&["nominal"]).contains("terminal residuals"));
    let table = run(&["screen", "--samples", "4"]);
    assert!(table.contains("4 samples used"), "{table}");
    assert!(run(&["precompute"]).contains("4 nodes"));
    for file in ["nominal.json", "screening.json", "grid.rjgd", "grid_log.json"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }

    let sim = run(&["simulate", "--theta", "0,0,0.5,-0.5,0,0,0.25"]);
    let sim: serde_json::Value = serde_json::from_str(&sim).unwrap();
    assert_eq!(sim["record"]["is_model_calls"], 0);
    assert!(sim["timing"]["reopt"].as_f64().unwrap() > 0.0);

    assert!(run(&["sweep", "--samples", "2"]).contains("speedup"));
    let records = std::fs::read_to_string(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert!(records.starts_with("draw,theta_m,theta_rho0,"));
    let hist: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("histogram.json")).unwrap()).unwrap();
    assert_eq!(hist["err_is"]["counts"].as_array().unwrap().len(), 4);

    let summary = std::fs::read(out_dir.join("summary.json")).unwrap();
    assert!(run(&["report"]).contains("P(err_is < 0.2)"));
    assert_eq!(std::fs::read(out_dir.join("summary.json")).unwrap(), summary);
}

#[test]
fn missing_inputs_give_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let o = replan(&["--out", &out, "sweep"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "IoError");

    let o = replan(&["--config", "/nonexistent.toml", "nominal"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "IoError");
}

#[test]
fn bad_arguments_give_json_errors() {
    let o = replan(&["--mode", "sideways", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "UsageError");

    let o = replan(&["launch"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[sweep]\nt_change = 9000.0\n").unwrap();
    let o = replan(&["--config", path.to_str().unwrap(), "nominal"]);
    assert_eq!(o.status.code(), Some(1));
    let err = error_json(&o);
    assert_eq!(err["error"]["kind"], "ConfigError");
    assert!(err["error"]["message"].as_str().unwrap().contains("t_change"));
}

#[test]
fn help_exits_cleanly() {
    let o = replan(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["nominal", "screen", "precompute", "simulate", "sweep", "report"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

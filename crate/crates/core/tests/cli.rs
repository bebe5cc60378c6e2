use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn editedid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editedid"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EDITEDID_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn schedule_prints_plan_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = editedid(&["schedule", "--T", "6", "--s1", "1", "--s2", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",DPM")).count(), 3);
}

#[test]
fn non_monotone_splice_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = editedid(&["schedule", "--convention", "from_noise"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR config "), "{}", stderr(&o));
}

#[test]
fn usage_and_missing_config_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = editedid(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR usage"));
    let o = editedid(&["--config", "nope.toml", "pipeline"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ERROR config nope.toml not found"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[align]\ninit_lambda = 0.7\n").unwrap();
    let o = editedid(&["--config", "c.toml", "align"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("align.init_lambda"), "{}", stderr(&o));
}

#[test]
fn pipeline_writes_outputs_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 3\n[sources]\nside = 8\nembed_dim = 48\n").unwrap();
    let o = editedid(&["--config", "c.toml", "--out", "run", "pipeline"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config_resolved.toml", "metrics.csv", "summary.txt", "alignment.csv", "target.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let resolved = fs::read_to_string(run.join("config_resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));
    assert!(fs::read_to_string(run.join("metrics.csv")).unwrap().starts_with("stage,metric,value"));

    let again = editedid(&["--config", "c.toml", "--out", "run", "pipeline"], dir.path());
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).starts_with("ERROR io "));
    let forced = editedid(&["--config", "c.toml", "--out", "run", "--force", "pipeline"], dir.path());
    assert_eq!(forced.status.code(), Some(0));
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_editedid"))
        .args(["--out", "s", "--seed", "9", "invert", "--T", "4"])
        .current_dir(dir.path())
        .env("EDITEDID_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(dir.path().join("s/config_resolved.toml")).unwrap().contains("seed = 9"));
    let o = editedid(&["--seed", "99999999999999999999", "schedule"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_resumes_from_existing_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[sources]\nside = 8\nembed_dim = 48\n[entangle]\nenabled = false\n").unwrap();
    let args = ["--config", "c.toml", "--out", "sw", "sweep-lambda", "--values", "0.02,0.5"];
    assert_eq!(editedid(&args, dir.path()).status.code(), Some(0));
    let csv = dir.path().join("sw/sweep_lambda.csv");
    let first = fs::read_to_string(&csv).unwrap();
    assert_eq!(first.lines().count(), 3);

    let more = ["--config", "c.toml", "--out", "sw", "--resume", "sweep-lambda", "--values", "0.02,0.1,0.5"];
    let o = editedid(&more, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let second = fs::read_to_string(&csv).unwrap();
    assert_eq!(second.lines().count(), 4);
    assert!(second.lines().nth(1) == first.lines().nth(1));
}

#[test]
fn batch_reports_failed_items() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("ok.toml"), "[sources]\nside = 8\nembed_dim = 48\n").unwrap();
    fs::write(p.join("bad.toml"), "[sources]\nside = 8\nembed_dim = 48\n[align]\neta = -1.0\n").unwrap();
    let o = editedid(&["--out", "b", "batch", "--configs", "ok.toml,bad.toml", "--workers", "2"], p);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let table = fs::read_to_string(p.join("b/batch.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("0,ok,"));
    assert!(table.lines().nth(2).unwrap().starts_with("1,error,"));
    assert!(p.join("b/item_00/metrics.csv").is_file());
}

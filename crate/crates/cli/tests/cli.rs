use std::path::Path;
use std::process::{Command, Output};

fn lipger(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipger"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, "seed = 4\n[toy]\nutterances = 12\n").unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn rerunning_a_stage_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = lipger(dir.path(), &["--config", &cfg, "simulate"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("simulate: done"));
    let wav = dir.path().join("simulated/audio/utt00000.wav");
    let before = std::fs::read(&wav).unwrap();
    let second = lipger(dir.path(), &["--config", &cfg, "simulate"]);
    assert!(second.status.success());
    assert!(stdout(&second).contains("up to date"), "{}", stdout(&second));
    assert_eq!(std::fs::read(&wav).unwrap(), before);
}

#[test]
fn downstream_stage_needs_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = lipger(dir.path(), &["decode"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate"));
}

#[test]
fn changed_upstream_config_is_reported_as_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(lipger(dir.path(), &["--config", &cfg, "simulate"]).status.success());
    assert!(lipger(dir.path(), &["--config", &cfg, "decode"]).status.success());
    // a different seed invalidates the simulated audio the decode read
    let o = lipger(dir.path(), &["--config", &cfg, "--seed", "5", "decode"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let forced = lipger(dir.path(), &["--config", &cfg, "--seed", "5", "--force", "decode"]);
    assert!(forced.status.success());
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lipger(dir.path(), &["simulate", "--bogus"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[decode]\nbeam = 2\n").unwrap();
    let o = lipger(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lipger(dir.path(), &["eval", "--systems", "onebest,oracle"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = lipger(dir.path(), &["--seed", "9", "show-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let cfg = lipger::pipeline::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    let path = dir.path().join("shown.toml");
    std::fs::write(&path, &text).unwrap();
    let again = lipger(dir.path(), &["--config", path.to_str().unwrap(), "show-config"]);
    assert_eq!(stdout(&again), text);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn default_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn nsmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsmix")).args(args).output().expect("spawn nsmix")
}

const SMALL_MIX: [&str; 8] = [
    "--override",
    "run.n_chains=100",
    "--override",
    "coupling.max_macro_steps=8",
    "--override",
    "run.replicas=2",
    "--override",
    "run.samples_per_replica=20",
];

fn mix_into(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["mix", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    nsmix(&args)
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.toml")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn missing_config_names_the_path() {
    let out = nsmix(&["simulate", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.toml"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config();
    let out = nsmix(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "model.bogus=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn out_of_range_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config();
    let out = nsmix(&[
        "couple",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "coupling.delta=-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config();
    let out = nsmix(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("trajectory.json")).unwrap()).unwrap();
    assert!(traj.is_object());
    let series = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.starts_with("t,l2_sq,h1_sq,h2_sq\n"));
    assert!(series.lines().count() > 2);
    let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = \"20240601\""));
}

#[test]
fn mix_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = default_config();
    assert!(mix_into(&cfg, a.path(), &SMALL_MIX).status.success());
    let mut args = SMALL_MIX.to_vec();
    args.extend_from_slice(&["--threads", "1"]);
    assert!(mix_into(&cfg, b.path(), &args).status.success());
    let fa = data_files(a.path());
    assert!(fa.iter().any(|(n, _)| n == "decay.csv"));
    assert_eq!(fa, data_files(b.path()));
}

#[test]
fn seed_changes_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = default_config();
    assert!(mix_into(&cfg, a.path(), &SMALL_MIX).status.success());
    let mut args = SMALL_MIX.to_vec();
    args.extend_from_slice(&["--seed", "7"]);
    assert!(mix_into(&cfg, b.path(), &args).status.success());
    assert_ne!(fs::read(a.path().join("tau.csv")).unwrap(), fs::read(b.path().join("tau.csv")).unwrap());
}

#[test]
fn manifest_replays_exactly() {
    let first = tempfile::tempdir().unwrap();
    let replay = tempfile::tempdir().unwrap();
    assert!(mix_into(&default_config(), first.path(), &SMALL_MIX).status.success());
    let manifest = first.path().join("manifest.toml");
    let out = mix_into(&manifest, replay.path(), &["--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_files(first.path()), data_files(replay.path()));
}

#[test]
fn manifest_command_must_match() {
    let first = tempfile::tempdir().unwrap();
    assert!(mix_into(&default_config(), first.path(), &SMALL_MIX).status.success());
    let manifest = first.path().join("manifest.toml");
    let out = nsmix(&["simulate", "--config", manifest.to_str().unwrap(), "--out", first.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn blow_up_overflow_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_MIX.to_vec();
    args.extend_from_slice(&["--override", "run.x0_amplitude=1e3"]);
    let out = mix_into(&default_config(), dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

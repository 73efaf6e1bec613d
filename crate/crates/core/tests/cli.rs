use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 9\npatients = 30\nmax_epochs = 1\n";

fn lungfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungfuse"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_conf(dir: &Path, text: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, text).unwrap();
    s(&p)
}

#[test]
fn unknown_config_key_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "seed = 1\nlearning_rte = 0.1\n");
    let o = lungfuse(&["synth", "--config", &conf, "--out", &s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn usage_errors_exit_3() {
    assert_eq!(lungfuse(&["synth"]).status.code(), Some(3));
    assert_eq!(lungfuse(&["frobnicate"]).status.code(), Some(3));
    assert_eq!(lungfuse(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_method_and_stage_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());
    let o = lungfuse(&[
        "explain",
        "--checkpoint",
        &d,
        "--data",
        &d,
        "--out",
        &d,
        "--methods",
        "saliency,lime",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("lime"));
    let o = lungfuse(&["train", "--data", &d, "--out", &d, "--stage", "late"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), TINY);
    let data = s(&dir.path().join("data"));
    assert_eq!(
        lungfuse(&["synth", "--config", &conf, "--out", &data]).status.code(),
        Some(0)
    );

    let models = s(&dir.path().join("models"));
    let o = lungfuse(&[
        "train", "--config", &conf, "--data", &data, "--out", &models, "--stage", "fusion",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("ct.dsm"));

    let run = dir.path().join("empty_run");
    std::fs::create_dir_all(&run).unwrap();
    assert_eq!(lungfuse(&["report", "--run", &s(&run)]).status.code(), Some(4));

    let o = lungfuse(&[
        "train",
        "--config",
        &conf,
        "--data",
        &s(&dir.path().join("nowhere")),
        "--out",
        &models,
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), TINY);
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let o = lungfuse(&["synth", "--config", &conf, "--out", &s(&dir.path().join(name))]);
        assert!(o.status.success(), "{}", stderr(&o));
        let path = String::from_utf8(o.stdout).unwrap();
        manifests.push(std::fs::read(path.trim()).unwrap());
    }
    assert!(!manifests[0].is_empty());
    assert_eq!(manifests[0], manifests[1]);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gansfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gansfer")).args(args).env_remove("GANSFER_OUTPUT").output().unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let path = dir.join("smoke.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn bad_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "output_root = \"x\"\nbudgets = [3]\nratios = [\"baseline\"]\n").unwrap();
    let out = gansfer(&["-c", path.to_str().unwrap(), "report"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_results_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let out = gansfer(&["-c", &cfg, "--output", tmp.path().join("out").to_str().unwrap(), "report"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn quick_check_passes_for_one_criterion() {
    let out = gansfer(&["check", "6"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("criterion  6 PASS"), "{stdout}");
    assert_eq!(gansfer(&["check", "99"]).status.code(), Some(2));
}

#[test]
fn staged_smoke_run_produces_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let root = tmp.path().join("out");
    let root_s = root.to_str().unwrap();
    for stage in [
        vec!["preprocess"],
        vec!["train-gan", "--phase", "1"],
        vec!["train-gan"],
        vec!["synth"],
        vec!["postprocess"],
        vec!["filter"],
        vec!["train-seg"],
        vec!["evaluate"],
        vec!["classify", "--ratio", "baseline"],
        vec!["report"],
    ] {
        let mut args = vec!["-c", &cfg, "--output", root_s, "--fold", "0"];
        args.extend(stage.iter());
        let out = gansfer(&args);
        assert!(out.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let t1 = fs::read_to_string(root.join("tables/table1.csv")).unwrap();
    assert!(t1.lines().any(|l| l.starts_with("1,baseline,in_domain,")));
    assert!(root.join("plots/dsc_vs_age.svg").exists());
    assert_eq!(gansfer(&["-c", &cfg, "--output", root_s, "--fold", "7", "report"]).status.code(), Some(2));
}

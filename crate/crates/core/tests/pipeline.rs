use std::fs;
use std::path::Path;

use gansfer_core::error::Error;
use gansfer_core::experiment::{run_experiment, ExperimentConfig};
use gansfer_core::report::report;

fn config(root: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
output_root = "{}"
folds = [0]
budgets = [1]
ratios = ["baseline", "1"]
preset = "tiny"

[phantom]
n_subjects = 16
n_labelled = 10
roi_size = 16
roi_depth = 8

[gan]
images_per_stage = 64
phase2_images = 64
phase3_images = 64

[seg]
steps = 20

[synth]
n_samples = 8

[classify]
repeats = 2
folds = 2
"#,
        root.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn outputs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for dir in ["tables", "plots"] {
        let mut names: Vec<_> = fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            v.push((p.display().to_string(), fs::read(&p).unwrap()));
        }
    }
    v
}

#[test]
fn tiny_run_writes_tables_and_resumes_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let summary = run_experiment(&cfg, &mut |_| {}).unwrap();
    assert!(summary.table1.exists() && summary.table2.exists());
    assert_eq!(summary.plots.len(), 3);
    let t1 = fs::read_to_string(&summary.table1).unwrap();
    assert!(t1.starts_with("budget,ratio,set,n,Total,"));
    // baseline and one augmented ratio, each with two evaluation sets
    assert_eq!(t1.lines().count(), 5);
    assert!(tmp.path().join("manifest.json").exists());

    let first = outputs(tmp.path());
    run_experiment(&cfg, &mut |_| {}).unwrap();
    assert_eq!(first, outputs(tmp.path()));

    fs::remove_dir_all(tmp.path().join("tables")).unwrap();
    report(&cfg).unwrap();
    assert_eq!(first, outputs(tmp.path()));
}

#[test]
fn report_without_results_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    assert!(matches!(report(&cfg), Err(Error::MissingResults(_))));
}

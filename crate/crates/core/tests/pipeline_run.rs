use std::path::Path;
use std::process::Command;

use privpf::pipeline::{artifact, read_magnitudes_csv, Manifest, Pipeline, RunConfig, Stage};

const SMALL: &str = r#"
[feeder]
buses = 6

[profiles]
samples = 192
noise_pct = 0.2

[collect]
dim = 6

[train]
preset = "ann-0"
epochs = 3
lr = 1e-4

[drift]
samples = 192
windows = 4

[update]
frozen = [4, 5]
update_samples = 96
max_epochs = 2
force = true
"#;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn full_run_collects_exactly_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        Pipeline::new(small(out)).unwrap().run(Stage::All).unwrap();
    }

    let (ids, measured) = read_magnitudes_csv(a.join(artifact::MEASURED)).unwrap();
    let (ids_c, collected) = read_magnitudes_csv(a.join(artifact::COLLECTED)).unwrap();
    assert_eq!(ids, ids_c);
    assert_eq!(measured, collected);
    assert_eq!(ids.len(), 5);

    for name in [artifact::MODEL, artifact::MODEL_UPDATED, artifact::COLLECTED, artifact::DRIFT, artifact::ESTIMATES] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
    assert!(a.join(artifact::REPORT_DIR).join("summary.csv").exists());

    let manifest = Manifest::load(&a).unwrap().unwrap();
    assert_eq!(manifest.stages.len(), Stage::SEQUENCE.len());
    assert_eq!(manifest.config_sha256, small(&b).hash());
}

#[test]
fn stages_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(dir.path())).unwrap();
    for stage in [Stage::GenNetwork, Stage::GenProfiles, Stage::SolvePf] {
        p.run(stage).unwrap();
    }
    let again = Pipeline::new(small(dir.path())).unwrap();
    again.run(Stage::Collect).unwrap();
    assert!(dir.path().join(artifact::SESSIONS).exists());
}

#[test]
fn freezing_a_layer_the_preset_lacks_is_rejected() {
    let mut cfg = small(Path::new("unused"));
    cfg.update.il.frozen = vec![4, 5, 6];
    assert!(cfg.validate().unwrap_err().to_string().contains("layer 6"));
}

#[test]
fn missing_artifact_names_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let err = Pipeline::new(small(dir.path())).unwrap().run(Stage::Train).unwrap_err().to_string();
    assert!(err.contains("run the `"), "{err}");
}

#[test]
fn cli_reports_missing_artifacts_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_privpf")).args(["--stage", "estimate", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error: missing"), "{stderr}");
    assert!(stderr.contains("stage first"), "{stderr}");

    let out = Command::new(env!("CARGO_BIN_EXE_privpf")).args(["--preset", "nl-hourly", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(cfg, RunConfig::preset("nl-hourly").unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_privpf")).args(["--stage", "bogus", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}

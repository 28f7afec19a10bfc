use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protoadapt::RunManifest;

const BIN: &str = env!("CARGO_BIN_EXE_protoadapt");

/// Keeps CLI runs short; the pipeline itself is covered elsewhere.
const QUICK: &str = "stage1.epochs=2\ndistill.epochs=1\npretrain.epochs=1\nwarmup.epochs=3\n";

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.conf");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), QUICK);
    let out = tmp.path().join("run");
    let o = cli(&["run", "--config", &conf, "--seed", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "manifest.json", "model.ckpt", "prototypes.csv", "labels.csv", "target_features.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("plots").read_dir().unwrap().count() >= 3);
    let m = manifest(&out);
    assert_eq!(m.config["seed"], "3");
    assert_eq!(m.stages.len(), 4);
    assert!(m.failure.is_none());
}

#[test]
fn stages_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{QUICK}stages=stage1,distill,distill\n"));
    let out = tmp.path().join("run");
    let o = cli(&["run", "--config", &conf, "--stages", "stage1", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    let names: Vec<String> = manifest(&out).stages.into_iter().map(|s| s.stage).collect();
    assert_eq!(names, ["warmup", "stage1"]);
}

#[test]
fn baseline_stops_after_warmup() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), QUICK);
    let out = tmp.path().join("base");
    let o = cli(&["baseline", "--config", &conf, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    let m = manifest(&out);
    assert_eq!(m.stages.len(), 1);
    assert_eq!(m.stages[0].stage, "warmup");
}

#[test]
fn sweep_writes_one_manifest_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{QUICK}stages=stage1\nstage1.tau=0.5,1\nstage1.gamma1=0,10\n"));
    let out = tmp.path().join("sweep");
    let o = cli(&["sweep", "--config", &conf, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut points: Vec<(String, String)> = (0..4)
        .map(|i| {
            let m = manifest(&out.join(format!("point_{i:03}")));
            (m.config["stage1.tau"].clone(), m.config["stage1.gamma1"].clone())
        })
        .collect();
    points.sort();
    assert_eq!(
        points,
        [("0.5", "0"), ("0.5", "10"), ("1", "0"), ("1", "10")].map(|(a, b)| (a.to_string(), b.to_string()))
    );
    assert!(!out.join("point_004").exists());
}

#[test]
fn plot_redraws_identical_svgs() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), QUICK);
    let out = tmp.path().join("run");
    assert!(cli(&["run", "--config", &conf, "--out-dir", out.to_str().unwrap()]).status.success());
    let read_svgs = || -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(out.join("plots"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let before = read_svgs();
    fs::remove_dir_all(out.join("plots")).unwrap();
    assert!(cli(&["plot", "--out-dir", out.to_str().unwrap()]).status.success());
    assert_eq!(read_svgs(), before);
}

#[test]
fn bad_config_exits_with_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), "stage1.nonsense=1\n");
    let o = cli(&["run", "--config", &conf, "--out-dir", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), QUICK);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        assert!(cli(&["run", "--config", &conf, "--seed", "9", "--out-dir", d.to_str().unwrap()]).status.success());
    }
    let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
}

use std::path::Path;
use std::process::{Command, Output};

use pace::config::RunConfig;
use pace::eval::agreement_accuracy;
use pace::pipeline;
use pace::synthparts::Split;

const TINY: &str = "\
classes = 2
images_per_class = 10
bb_epochs = 1
pace_epochs = 1
pace_batch_size = 8
concepts = 2
embedding_dim = 4
workdir = work
";

fn pace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pace")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = pace(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pace.cfg"), TINY).unwrap();
    dir
}

#[test]
fn full_sequence_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    for cmd in ["gen", "train-bb", "train-pace", "baseline", "eval"] {
        ok(d, &[cmd, "--config", "pace.cfg"]);
    }
    for f in [
        "work/dataset/meta.json",
        "work/checkpoints/blackbox.ckpt",
        "work/checkpoints/explainer.ckpt",
        "work/checkpoints/baseline.ckpt",
        "work/reports/eval.json",
        "work/reports/eval.txt",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let summary = std::fs::read_to_string(d.join("work/reports/eval.txt")).unwrap();
    assert!(summary.contains("proxy"));

    ok(d, &["explain", "--config", "pace.cfg", "--image", "work/dataset/images/00000.ppm", "--out", "ex"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("ex/explanation.json")).unwrap()).unwrap();
    for key in ["predicted_label", "explainer_probs", "black_box_probs", "concepts"] {
        assert!(report.get(key).is_some(), "{key} missing");
    }
    let concepts = report["concepts"].as_array().unwrap();
    assert_eq!(concepts.len(), 2);
    for c in concepts {
        let mask = std::fs::read(d.join("ex").join(c["mask_file"].as_str().unwrap())).unwrap();
        let (w, h, px) = pace::netpbm::decode_pgm(&mask).unwrap();
        assert_eq!((w, h), (32, 32));
        assert!(px.iter().all(|&v| v == 0 || v == 255));
        assert!(d.join("ex").join(c["heatmap_file"].as_str().unwrap()).is_file());
    }

    // default output directory is derived from the image name
    ok(d, &["explain", "--config", "pace.cfg", "--image", "work/dataset/images/00001.ppm"]);
    assert!(d.join("work/reports/explain/00001/explanation.json").is_file());
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = setup();
    let d = dir.path();
    for cmd in ["gen", "train-bb", "train-pace"] {
        ok(d, &[cmd, "--config", "pace.cfg"]);
    }
    let first = std::fs::read(d.join("work/checkpoints/explainer.ckpt")).unwrap();
    let bb = std::fs::read(d.join("work/checkpoints/blackbox.ckpt")).unwrap();
    ok(d, &["train-bb", "--config", "pace.cfg"]);
    ok(d, &["train-pace", "--config", "pace.cfg"]);
    assert_eq!(std::fs::read(d.join("work/checkpoints/blackbox.ckpt")).unwrap(), bb);
    assert_eq!(std::fs::read(d.join("work/checkpoints/explainer.ckpt")).unwrap(), first);
}

#[test]
fn eval_matches_the_library_result() {
    let dir = setup();
    let cfg = RunConfig::load(&dir.path().join("pace.cfg")).unwrap();
    let report = pipeline::run_all(&cfg).unwrap();
    let ds = pipeline::load_dataset(&cfg).unwrap();
    let model = pipeline::load_blackbox(&cfg).unwrap();
    let bank = pipeline::load_explainer(&cfg).unwrap();
    let test: Vec<_> = ds.indices(Split::Test).iter().map(|&i| &ds.images[i]).collect();
    let direct = agreement_accuracy(&model, &bank, &test).unwrap();
    assert_eq!(report.pace, direct);
    let on_disk: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.report_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(on_disk["pace"]["accuracy"].as_f64().unwrap().to_bits(), direct.accuracy.to_bits());
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "tau = 150\n").unwrap();
    let out = pace(d, &["gen", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`tau`"));
    assert!(!d.join("work").exists(), "a rejected config must not touch the disk");

    std::fs::write(d.join("unknown.cfg"), "tua = 90\n").unwrap();
    assert_eq!(pace(d, &["gen", "--config", "unknown.cfg"]).status.code(), Some(2));

    let out = pace(d, &["train-bb", "--config", "pace.cfg"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta.json"));
    assert_eq!(pace(d, &["eval", "--config", "missing.cfg"]).status.code(), Some(3));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = pace(dir.path(), &["default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text, Path::new("")).unwrap(), RunConfig::default());
}

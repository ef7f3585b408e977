use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::json;

use avfusion_cli::checkpoint;
use avfusion_cli::commands;
use avfusion_cli::config::{self, RunConfig, Sources};
use avfusion_cli::dataset::{load_dataset, save_dataset};
use avfusion_core::data::{generate, Dataset, Label, SynthSpec};
use avfusion_core::fusion::Task;
use avfusion_core::robustness::TestSetting;

fn tiny_sets(out: &Path) -> Vec<String> {
    [
        "task.classes=3",
        "synth.audio_len=16",
        "synth.vision_len=5",
        "synth.audio_dim=4",
        "synth.vision_dim=6",
        "synth.train=24",
        "synth.val=12",
        "synth.test=12",
        "synth.group_size=6",
        "model.latent_dim=8",
        "model.ff_hidden=16",
        "fusion.heads=2",
        "optim.epochs=2",
        "optim.batch_size=8",
        "optim.lr=0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("out={}", out.display())])
    .collect()
}

fn tiny(out: &Path) -> RunConfig {
    config::resolve(&Sources {
        sets: tiny_sets(out),
        ..Sources::default()
    })
    .unwrap()
}

fn small_spec(task: Task) -> SynthSpec {
    SynthSpec {
        task,
        audio_len: 6,
        vision_len: 4,
        audio_dim: 3,
        vision_dim: 2,
        train: 5,
        val: 3,
        test: 2,
        group_size: 2,
        ..SynthSpec::default()
    }
}

#[test]
fn dataset_roundtrip_is_bitwise() {
    for task in [Task::Classification { classes: 4 }, Task::Regression] {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec(task)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.task, ds.task);
        for (a, b) in [(&back.train, &ds.train), (&back.val, &ds.val), (&back.test, &ds.test)] {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.group, y.group);
                assert_eq!(x.audio.shape(), y.audio.shape());
                let bits = |t: &avfusion_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&x.audio), bits(&y.audio));
                assert_eq!(bits(&x.vision), bits(&y.vision));
                match (x.label, y.label) {
                    (Label::Score(p), Label::Score(q)) => assert_eq!(p.to_bits(), q.to_bits()),
                    (p, q) => assert_eq!(p, q),
                }
            }
        }
    }
}

#[test]
fn generation_files_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec(Task::Classification { classes: 3 });
    save_dataset(&generate(&spec).unwrap(), a.path()).unwrap();
    save_dataset(&generate(&spec).unwrap(), b.path()).unwrap();
    for rel in ["manifest.json", "train/train-000000.audio.csv", "test/test-000001.vision.csv"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn missing_sequence_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate(&small_spec(Task::Regression)).unwrap(), dir.path()).unwrap();
    let victim = dir.path().join("val/val-000001.vision.csv");
    fs::remove_file(&victim).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("val-000001.vision.csv"), "{err}");
}

#[test]
fn bad_manifest_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("manifest.json"), "{err}");
    fs::write(dir.path().join("manifest.json"), "{\"schema_version\": 1").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn empty_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::empty(Task::Classification { classes: 2 }, 3, 4);
    save_dataset(&ds, dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"], json!([]));
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.is_empty());
    assert_eq!((back.audio_dim, back.vision_dim), (3, 4));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    fs::write(&file, r#"{"fusion": {"kind": "IA", "heads": 4}, "optim.lr": 0.5}"#).unwrap();
    let cfg = config::resolve(&Sources {
        file: Some(file.clone()),
        sets: vec!["optim.lr=0.25".into()],
        seed: Some(9),
        settings: Some("AV,NV".into()),
        ..Sources::default()
    })
    .unwrap();
    assert_eq!(cfg.run_name(), "IA4");
    assert_eq!((cfg.lr, cfg.seed), (0.25, 9));
    assert_eq!(cfg.eval_settings, vec![TestSetting::AV, TestSetting::NoiseV]);

    fs::write(&file, "").unwrap();
    let cfg = config::resolve(&Sources {
        file: Some(file),
        ..Sources::default()
    })
    .unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn train_is_deterministic_and_eval_reports_settings() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg_a = tiny(a.path());
    cfg_a.seed = 1;
    let mut cfg_b = tiny(b.path());
    cfg_b.seed = 1;
    commands::train(&cfg_a).unwrap();
    commands::train(&cfg_b).unwrap();
    let ck_a = fs::read(a.path().join(commands::CHECKPOINT)).unwrap();
    assert_eq!(ck_a, fs::read(b.path().join(commands::CHECKPOINT)).unwrap());
    assert_eq!(
        fs::read(a.path().join(commands::HISTORY)).unwrap(),
        fs::read(b.path().join(commands::HISTORY)).unwrap()
    );
    let history = fs::read_to_string(a.path().join(commands::HISTORY)).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(checkpoint::load(&a.path().join(commands::CHECKPOINT)).unwrap().standardizer.is_some());

    let table = commands::eval(&cfg_a).unwrap();
    let header = table.csv.lines().next().unwrap();
    assert_eq!(header, "name,metric,AV,A,V,M,NA,NV,M_noise");
    let row: Vec<&str> = table.csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "acc");
    assert!(row[2..6].iter().all(|c| !c.is_empty()));
    assert!(row[6..].iter().all(|c| c.is_empty()));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], json!(1));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = commands::eval(&tiny(dir.path())).unwrap_err().to_string();
    assert!(err.contains("checkpoint.bin"), "{err}");
    assert!(!dir.path().join(commands::REPORT_CSV).exists());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avfusion"))
}

#[test]
fn binary_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .arg("generate")
        .args(tiny_sets(dir.path()).iter().flat_map(|s| ["--set", s.as_str()]))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("config.json").exists());

    let bad = bin().args(["train", "--set", "dropout.p_full=2.0"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dropout"));

    let bad = bin().args(["train", "--set", "fusion.kind=XX"]).output().unwrap();
    assert!(!bad.status.success());
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("fusion.kind") && stderr.contains("IA"), "{stderr}");

    let missing = bin().args(["report", "no/such/report.csv"]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn report_merges_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    let two = dir.path().join("two.csv");
    fs::write(&one, "name,metric,AV,A,V,M,NA,NV,M_noise\nLT,acc,0.9,0.5,0.7,0.7,,,\n").unwrap();
    fs::write(&two, "name,metric,AV,A,V,M,NA,NV,M_noise\nIA1,acc,0.95,0.6,0.8,,0.9,0.7,\n").unwrap();
    let out = dir.path().join("merged");
    let status = bin()
        .arg("report")
        .arg(&one)
        .arg(&two)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("LT,acc,0.9,0.5,0.7,"));
    assert!(rows[2].starts_with("IA1,acc,0.95,"));
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("IA1"));
}

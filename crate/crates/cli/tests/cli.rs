use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use recpillars::evaluation::MetricsReport;
use recpillars::numerics::Checkpoint;
use recpillars_cli::bench::{cmd_bench, Stage};
use recpillars_cli::commands::{
    checkpoint_files, cmd_eval, cmd_infer, cmd_plot_bev, cmd_synth, cmd_train, load_dataset,
    load_detections, DataIndex, CHECKPOINT_NAME, INDEX_NAME, LOG_HEADER, LOG_NAME,
};
use recpillars_cli::config::{RunConfig, RESOLVED_NAME};

const TINY: &str = r#"
seed = 4

[model.grid]
x_min = 0.0
x_max = 16.0
y_min = -8.0
y_max = 8.0
cell = 1.0

[model.pillar]
channels = 4

[model.backbone]
layers = [1, 1, 1]
down_mult = [1, 1, 2]
up_mult = 1

[scene]
n_scans = 3
spawn_x = [1.0, 15.0]
spawn_y = [-7.0, 7.0]
ground_range = 20.0
ground_points = 200
clutter_count = [1, 3]

[train]
steps = 20

[train.loss]
k_min = 1
k_max = 2
"#;

fn tiny(dir: &Path, sets: &[&str]) -> RunConfig {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    RunConfig::load(Some(&p), &sets, None).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn resolved(dir: &Path) -> RunConfig {
    toml::from_str(&fs::read_to_string(dir.join(RESOLVED_NAME)).unwrap()).unwrap()
}

#[test]
fn synth_single_sequence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path(), &[]);
    let out = t.path().join("data");
    let paths = cmd_synth(&cfg, 1, &out).unwrap();
    assert_eq!(paths.len(), 1);
    let names: Vec<String> = files(&out).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        [
            "config.toml",
            "index.json",
            "seq_00000.json",
            "seq_00000.scan0.bin",
            "seq_00000.scan1.bin",
            "seq_00000.scan2.bin"
        ]
    );
    assert_eq!(resolved(&out), cfg);
}

#[test]
fn synth_is_bitwise_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path(), &[]);
    cmd_synth(&cfg, 3, &t.path().join("a")).unwrap();
    cmd_synth(&cfg, 3, &t.path().join("b")).unwrap();
    assert_eq!(files(&t.path().join("a")), files(&t.path().join("b")));
    let other = tiny(t.path(), &["seed=5"]);
    cmd_synth(&other, 3, &t.path().join("c")).unwrap();
    assert_ne!(files(&t.path().join("a")), files(&t.path().join("c")));
}

#[test]
fn synth_hundred_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path(), &["scene.n_scans=1", "scene.ground_points=20"]);
    let out = t.path().join("data");
    cmd_synth(&cfg, 100, &out).unwrap();
    let data = load_dataset(&out).unwrap();
    assert_eq!(data.len(), 100);
    for (i, seq) in data.iter().enumerate() {
        let mut scene = cfg.scene.clone();
        scene.seed = recpillars_cli::commands::scene_seed(cfg.seed, i);
        assert_eq!(*seq, recpillars::dataio::generate_scene(&scene).unwrap());
    }
}

#[test]
fn empty_dataset_rejected() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join(INDEX_NAME),
        serde_json::to_string(&DataIndex { sequences: vec![] }).unwrap(),
    )
    .unwrap();
    assert!(load_dataset(t.path()).is_err());
    let cfg = tiny(t.path(), &[]);
    assert!(cmd_train(&cfg, t.path(), &t.path().join("run"), None).is_err());
}

fn synth_and_train(root: &Path, sets: &[&str], run: &str) -> (RunConfig, PathBuf, PathBuf) {
    let cfg = tiny(root, sets);
    let data = root.join("data");
    if !data.join(INDEX_NAME).exists() {
        cmd_synth(&cfg, 4, &data).unwrap();
    }
    let out = root.join(run);
    cmd_train(&cfg, &data, &out, None).unwrap();
    (cfg, data, out)
}

#[test]
fn train_writes_reloadable_checkpoint_and_log() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, _, out) = synth_and_train(t.path(), &["train.epochs=1"], "run");
    for f in checkpoint_files(&out.join(CHECKPOINT_NAME)) {
        assert!(f.exists(), "{}", f.display());
    }
    let ck = Checkpoint::load(&out.join(CHECKPOINT_NAME)).unwrap();
    assert_eq!(ck.meta["step"], 4);
    let log = fs::read_to_string(out.join(LOG_NAME)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(resolved(&out), cfg);
}

#[test]
fn training_log_is_bitwise_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (_, _, a) = synth_and_train(t.path(), &[], "a");
    let (_, _, b) = synth_and_train(t.path(), &[], "b");
    assert_eq!(
        fs::read(a.join(LOG_NAME)).unwrap(),
        fs::read(b.join(LOG_NAME)).unwrap()
    );
    assert_eq!(
        fs::read(a.join(CHECKPOINT_NAME)).unwrap(),
        fs::read(b.join(CHECKPOINT_NAME)).unwrap()
    );
}

#[test]
fn resume_continues_step_counter() {
    let t = tempfile::tempdir().unwrap();
    let (_, data, out) = synth_and_train(t.path(), &["train.steps=5"], "run");
    let cfg = tiny(t.path(), &["train.steps=9"]);
    let s = cmd_train(&cfg, &data, &out, Some(&out.join(CHECKPOINT_NAME))).unwrap();
    assert_eq!(s.steps, 9);
    let log = fs::read_to_string(out.join(LOG_NAME)).unwrap();
    let steps: Vec<usize> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=9).collect::<Vec<_>>());
}

#[test]
fn config_data_mismatch_rejected_before_training() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path(), &["scene.n_scans=1"]);
    cmd_synth(&cfg, 2, &t.path().join("data")).unwrap();
    let err = cmd_train(&cfg, &t.path().join("data"), &t.path().join("run"), None).unwrap_err();
    assert!(format!("{err:#}").contains("k_min"), "{err:#}");
    assert!(!t.path().join("run").join(LOG_NAME).exists());
}

#[test]
fn eval_report_and_incompatible_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, data, out) = synth_and_train(t.path(), &[], "run");
    let ev = t.path().join("eval");
    let report = cmd_eval(&cfg, &out.join(CHECKPOINT_NAME), &data, &ev).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["frames", "range_normalized_ate", "overall", "bins"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    for key in ["map", "mate", "mase", "maoe", "nds", "per_class"] {
        assert!(json["overall"].get(key).is_some(), "{key}");
    }
    assert_eq!(json["bins"].as_array().unwrap().len(), 3);
    let back: MetricsReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.frames, 4);
    assert!(fs::read_to_string(ev.join("metrics.txt"))
        .unwrap()
        .contains("mAP"));
    assert_eq!(resolved(&ev), cfg);

    let wider = tiny(t.path(), &["model.pillar.channels=8"]);
    let err = cmd_eval(
        &wider,
        &out.join(CHECKPOINT_NAME),
        &data,
        &t.path().join("e2"),
    )
    .unwrap_err();
    let msg = format!("{err:#}");
    assert!(
        msg.contains("encoder.linear.weight") && msg.contains("[1, 1, 9, 8]"),
        "{msg}"
    );
}

#[test]
fn converged_run_detects_on_training_set() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, data, out) = synth_and_train(
        t.path(),
        &["train.steps=400", "model.memory.placement=none"],
        "run",
    );
    let report = cmd_eval(
        &cfg,
        &out.join(CHECKPOINT_NAME),
        &data,
        &t.path().join("eval"),
    )
    .unwrap();
    assert!(report.overall.map > 0.0, "{}", report.to_text());
}

#[test]
fn infer_then_plot() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, data, out) = synth_and_train(t.path(), &[], "run");
    let dets_dir = t.path().join("dets");
    let written = cmd_infer(&cfg, &out.join(CHECKPOINT_NAME), &data, &dets_dir).unwrap();
    assert_eq!(written.len(), 4);
    let dets = load_detections(&written[0]).unwrap();
    assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.score)));

    let seq = data.join("seq_00000.json");
    let a = t.path().join("plots/a.svg");
    let b = t.path().join("plots/b.svg");
    cmd_plot_bev(&cfg, &seq, Some(&written[0]), &a).unwrap();
    cmd_plot_bev(&cfg, &seq, Some(&written[0]), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let svg = fs::read_to_string(&a).unwrap();
    assert_eq!(svg.matches("<polygon class=\"det\"").count(), dets.len());

    let bare = t.path().join("plots/bare.svg");
    cmd_plot_bev(&cfg, &seq, None, &bare).unwrap();
    let svg = fs::read_to_string(&bare).unwrap();
    let n_gt = recpillars::dataio::load_sequence(&seq)
        .unwrap()
        .annotations
        .len();
    assert_eq!(svg.matches("<polygon class=\"gt\"").count(), n_gt);
    assert_eq!(svg.matches("class=\"det\"").count(), 0);
    assert!(svg.contains("<rect x="));
}

#[test]
fn bench_rows() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path(), &[]);
    let rows = cmd_bench(&cfg, Stage::Forward, 1).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].repetitions, 1);
    let e2e = cmd_bench(&cfg, Stage::E2e, 2).unwrap();
    assert_eq!(e2e.len(), 2);
    assert!(e2e[1].label.contains("single frame"));
    let big = tiny(t.path(), &["scene.ground_points=200000", "scene.n_scans=1"]);
    let rows = cmd_bench(&big, Stage::Pillarize, 1).unwrap();
    assert_eq!(rows[0].points, 200000);
}

#[test]
fn binary_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let cfg_path = t.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let bin = env!("CARGO_BIN_EXE_recpillars");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    let cfg = cfg_path.to_str().unwrap();
    let data = t.path().join("data");
    let run_dir = t.path().join("run");
    run(&[
        "--config",
        cfg,
        "--out",
        data.to_str().unwrap(),
        "synth",
        "--count",
        "2",
    ]);
    run(&[
        "--config",
        cfg,
        "--set",
        "train.steps=3",
        "--out",
        run_dir.to_str().unwrap(),
        "train",
        "--data",
        data.to_str().unwrap(),
    ]);
    let text = run(&[
        "--config",
        cfg,
        "--out",
        t.path().join("eval").to_str().unwrap(),
        "eval",
        "--checkpoint",
        run_dir.join(CHECKPOINT_NAME).to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(text.contains("NDS"));
    let bench = run(&[
        "--config",
        cfg,
        "bench",
        "--stage",
        "pillarize",
        "--reps",
        "1",
    ]);
    assert_eq!(bench.lines().count(), 1);
    let bad = Command::new(bin)
        .args(["--set", "nonsense.key=1", "bench"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

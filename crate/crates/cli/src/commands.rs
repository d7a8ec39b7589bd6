//! Subcommand implementations. Each writes its outputs plus the resolved
//! configuration into an output directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use recpillars::dataio::{generate_scene, load_sequence, save_sequence, Sequence};
use recpillars::evaluation::{detect, evaluate_model, MetricsReport};
use recpillars::geometry::RotatedBox;
use recpillars::network::{Model, ModelConfig};
use recpillars::numerics::checkpoint::index_path;
use recpillars::numerics::{Checkpoint, ParamStore};
use recpillars::training::{transfer_weights, AdamW, LossBreakdown, Trainer};

use crate::config::RunConfig;

pub const INDEX_NAME: &str = "index.json";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOG_NAME: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,total,focal,loc,ang,aux";

/// Sequence manifests of a data directory, relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataIndex {
    pub sequences: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Generator seed of the `i`-th sequence of a run.
pub fn scene_seed(run_seed: u64, i: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Writes `count` generated sequences and an index into `out`.
pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    ensure!(count > 0, "count must be at least 1");
    create_dir(out)?;
    let mut names = Vec::with_capacity(count);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let mut scene = cfg.scene.clone();
        scene.seed = scene_seed(cfg.seed, i);
        let seq = generate_scene(&scene)?;
        let name = format!("seq_{i:05}.json");
        let path = out.join(&name);
        save_sequence(&seq, &path).with_context(|| format!("writing {}", path.display()))?;
        names.push(name);
        paths.push(path);
    }
    write_json(&out.join(INDEX_NAME), &DataIndex { sequences: names })?;
    cfg.write_resolved(out)?;
    Ok(paths)
}

/// Loads every sequence listed in `dir`'s index, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let p = dir.join(INDEX_NAME);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let index: DataIndex =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    ensure!(
        !index.sequences.is_empty(),
        "{} lists no sequences",
        p.display()
    );
    index
        .sequences
        .iter()
        .map(|n| load_sequence(&dir.join(n)).with_context(|| format!("loading {n}")))
        .collect()
}

/// The last `k_max + 1` scans of each sequence for a recurrent model (what
/// it was trained on), the core scan alone otherwise.
pub fn eval_window(cfg: &RunConfig, data: Vec<Sequence>) -> Vec<Sequence> {
    let n = if cfg.model.is_recurrent() {
        cfg.train.loss.k_max + 1
    } else {
        1
    };
    data.into_iter().map(|s| s.tail(n)).collect()
}

fn checkpoint_meta(
    model: &ModelConfig,
    trainer: Option<&Trainer<f32>>,
) -> Result<serde_json::Value> {
    let mut meta = serde_json::json!({ "model": serde_json::to_value(model)? });
    if let Some(t) = trainer {
        meta["step"] = t.step.into();
        meta["skipped"] = t.skipped.into();
        meta["rng_word_pos"] = t.rng_word_pos().to_string().into();
    }
    Ok(meta)
}

/// Loads a checkpoint that must cover every parameter of `store`.
pub fn load_full(store: &mut ParamStore<f32>, ck: &Checkpoint, path: &Path) -> Result<()> {
    let missing: Vec<&str> = store
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| ck.get(n).is_none())
        .collect();
    if !missing.is_empty() {
        bail!(
            "checkpoint {} lacks model keys: {}",
            path.display(),
            missing.join(", ")
        );
    }
    ck.load_into(store).with_context(|| {
        format!(
            "checkpoint {} does not fit the configured model",
            path.display()
        )
    })?;
    for (e, _) in &ck.entries {
        if !e.trainable {
            let id = store.id(&e.name).expect("checked above");
            store.param_mut(id).trainable = false;
        }
    }
    Ok(())
}

pub fn load_model(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(Model, ParamStore<f32>, Checkpoint)> {
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.seed)?;
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    load_full(&mut store, &ck, checkpoint)?;
    Ok((model, store, ck))
}

fn optim_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".optim");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub skipped: usize,
    pub last: Option<LossBreakdown>,
}

fn check_data(cfg: &RunConfig, data: &[Sequence]) -> Result<()> {
    let min_past = data.iter().map(|s| s.past_len()).min().unwrap_or(0);
    if cfg.model.is_recurrent() && cfg.train.loss.k_min > min_past {
        bail!(
            "train.loss.k_min = {} warm-up scans, but some sequences have only {} past scans",
            cfg.train.loss.k_min,
            min_past
        );
    }
    let grid = &cfg.model.grid;
    if data.iter().all(|s| {
        s.annotations
            .iter()
            .all(|b| grid.out_cell_of(b.cx, b.cy).is_none())
    }) {
        bail!("no annotation falls inside the configured grid");
    }
    Ok(())
}

/// Trains on the sequences in `data_dir`, writing the checkpoint, its
/// optimizer state and the loss log into `out`. With `resume`, parameters,
/// optimizer moments and the step counter continue from that checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let data = load_dataset(data_dir)?;
    check_data(cfg, &data)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.seed)?;
    if resume.is_none() {
        if let Some(src) = &cfg.train.transfer_from {
            let ck = Checkpoint::load(src).with_context(|| format!("loading {}", src.display()))?;
            transfer_weights(&mut store, &ck)
                .with_context(|| format!("transferring from {}", src.display()))?;
        }
        let prefixes: Vec<&str> = cfg.train.freeze.iter().map(String::as_str).collect();
        store.freeze_prefixes(&prefixes);
    }
    let tc = cfg.train.to_train_config(cfg.seed, data.len());
    let mut trainer = Trainer::new(model, store, tc)?;
    trainer.prepare(&data)?;

    let log_path = out.join(LOG_NAME);
    let log_file = match resume {
        Some(ck_path) => {
            let ck = Checkpoint::load(ck_path)
                .with_context(|| format!("loading {}", ck_path.display()))?;
            load_full(&mut trainer.store, &ck, ck_path)?;
            trainer.step = ck.meta["step"]
                .as_u64()
                .context("checkpoint lacks a step counter")? as usize;
            trainer.skipped = ck.meta["skipped"].as_u64().unwrap_or(0) as usize;
            if let Some(pos) = ck.meta["rng_word_pos"].as_str() {
                trainer.set_rng_word_pos(pos.parse().context("bad rng position")?);
            }
            let op = optim_path(ck_path);
            let ock = Checkpoint::load(&op).with_context(|| format!("loading {}", op.display()))?;
            trainer.opt = AdamW::from_checkpoint(cfg.train.optim.clone(), &ock)?;
            let exists = log_path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            if !exists {
                writeln!(f, "{LOG_HEADER}")?;
            }
            f
        }
        None => {
            let mut f = File::create(&log_path)
                .with_context(|| format!("creating {}", log_path.display()))?;
            writeln!(f, "{LOG_HEADER}")?;
            f
        }
    };
    let mut log = BufWriter::new(log_file);
    let mut last = None;
    let mut io_err = None;
    trainer.fit(&data, |step, l| {
        last = Some(*l);
        if io_err.is_none() {
            if let Err(e) = writeln!(
                log,
                "{step},{},{},{},{},{}",
                l.total, l.focal, l.loc_size, l.angle, l.aux
            ) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;

    let ck_path = out.join(CHECKPOINT_NAME);
    Checkpoint::from_store(&trainer.store, checkpoint_meta(&cfg.model, Some(&trainer))?)
        .save(&ck_path)
        .with_context(|| format!("writing {}", ck_path.display()))?;
    trainer
        .opt
        .to_checkpoint()
        .save(&optim_path(&ck_path))
        .context("writing optimizer state")?;
    Ok(TrainSummary {
        checkpoint: ck_path,
        steps: trainer.step,
        skipped: trainer.skipped,
        last,
    })
}

/// Scores a checkpoint on the sequences of `data_dir`; writes
/// `metrics.json` and `metrics.txt` into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<MetricsReport> {
    let (model, store, _) = load_model(cfg, checkpoint)?;
    let data = eval_window(cfg, load_dataset(data_dir)?);
    let report = evaluate_model(&model, &store, &data, &cfg.eval)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("metrics.txt"), report.to_text()).context("writing metrics.txt")?;
    Ok(report)
}

/// Writes `<sequence>.dets.json` per sequence of `data_dir` into `out`.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, store, _) = load_model(cfg, checkpoint)?;
    let p = data_dir.join(INDEX_NAME);
    let index: DataIndex = serde_json::from_str(
        &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
    )?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let data = eval_window(cfg, load_dataset(data_dir)?);
    let mut written = Vec::new();
    for (name, seq) in index.sequences.iter().zip(&data) {
        let dets = detect(&model, &store, seq, &cfg.eval)?;
        let stem = name.trim_end_matches(".json");
        let path = out.join(format!("{stem}.dets.json"));
        write_json(&path, &dets)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_detections(path: &Path) -> Result<Vec<RotatedBox>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing detections {}", path.display()))
}

/// Renders a sequence's core frame (and optional detections) to an SVG file.
pub fn cmd_plot_bev(
    cfg: &RunConfig,
    sequence: &Path,
    detections: Option<&Path>,
    out_file: &Path,
) -> Result<()> {
    let seq = load_sequence(sequence).with_context(|| format!("loading {}", sequence.display()))?;
    let dets = match detections {
        Some(p) => load_detections(p)?,
        None => Vec::new(),
    };
    let svg = crate::svg::render_bev(&seq, &dets, &cfg.model.grid);
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out_file, svg).with_context(|| format!("writing {}", out_file.display()))
}

/// Files making up a saved checkpoint: blob, index and optimizer state.
pub fn checkpoint_files(ckpt: &Path) -> [PathBuf; 3] {
    [ckpt.to_path_buf(), index_path(ckpt), optim_path(ckpt)]
}

//! Wall-clock timing of the inference stages.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Result};
use serde::Serialize;

use recpillars::dataio::{apply_point_budget, generate_scene, Sequence};
use recpillars::network::{MemoryPlacement, Model, ModelConfig};
use recpillars::numerics::{ForwardCtx, Mode, ParamStore};
use recpillars::pillars::pillarize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pillarize,
    Encode,
    Forward,
    E2e,
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pillarize" => Stage::Pillarize,
            "encode" => Stage::Encode,
            "forward" => Stage::Forward,
            "e2e" => Stage::E2e,
            _ => bail!("unknown stage `{s}` (pillarize, encode, forward, e2e)"),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pillarize => "pillarize",
            Stage::Encode => "encode",
            Stage::Forward => "forward",
            Stage::E2e => "e2e",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub label: String,
    pub repetitions: usize,
    pub points: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub hz: f64,
}

impl Timing {
    fn from_samples(label: String, points: usize, mut ms: Vec<f64>) -> Timing {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        let p99 = ms[((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Timing {
            label,
            repetitions: n,
            points,
            mean_ms: mean,
            median_ms: median,
            p99_ms: p99,
            hz: if mean > 0.0 {
                1000.0 / mean
            } else {
                f64::INFINITY
            },
        }
    }
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} reps {:>4}  points {:>7}  mean {:>9.3} ms  median {:>9.3} ms  p99 {:>9.3} ms  {:>8.2} Hz",
            self.label, self.repetitions, self.points, self.mean_ms, self.median_ms, self.p99_ms, self.hz
        )
    }
}

fn time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

fn single_frame(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.memory.placement = MemoryPlacement::None;
    c
}

fn run_model(
    cfg: &ModelConfig,
    seed: u64,
    seq: &Sequence,
    stage: Stage,
    reps: usize,
) -> Result<Vec<f64>> {
    let (model, store): (Model, ParamStore<f32>) = Model::build(cfg, seed)?;
    match stage {
        Stage::Encode => {
            let core = seq.core();
            time(reps, || {
                let p = model.prepare_scan(core, None)?;
                let mut ctx = ForwardCtx::new(Mode::Infer);
                model.encoder.forward(
                    &store,
                    &p.features::<f32>(),
                    &p.cell_index,
                    &cfg.grid,
                    &mut ctx,
                )?;
                Ok(())
            })
        }
        Stage::Forward => {
            let core = seq.core();
            time(reps, || {
                let p = model.prepare_scan(core, None)?;
                let mut ctx = ForwardCtx::new(Mode::Infer);
                model.step(&store, &p, &core.pose, None, &mut ctx, false)?;
                Ok(())
            })
        }
        _ => time(reps, || {
            let mut ctx = ForwardCtx::new(Mode::Infer);
            model.forward_sequence(&store, seq, None, &mut ctx)?;
            Ok(())
        }),
    }
}

/// Times `stage` on a generated sequence at the configured scale. The
/// end-to-end stage also times the single-frame variant of the model.
pub fn cmd_bench(cfg: &RunConfig, stage: Stage, reps: usize) -> Result<Vec<Timing>> {
    if reps == 0 {
        bail!("repetitions must be at least 1");
    }
    let seq = generate_scene(&cfg.scene)?;
    let core = seq.core();
    let n_points = core.points.len().min(cfg.model.pillar.point_budget);
    let mut rows = Vec::new();
    match stage {
        Stage::Pillarize => {
            let budget = cfg.model.pillar.point_budget;
            let ms = time(reps, || {
                let pts = apply_point_budget(&core.points, budget, 0);
                pillarize(&pts, &cfg.model.grid);
                Ok(())
            })?;
            rows.push(Timing::from_samples("pillarize".into(), n_points, ms));
        }
        Stage::Encode | Stage::Forward => {
            let ms = run_model(&cfg.model, cfg.seed, &seq, stage, reps)?;
            rows.push(Timing::from_samples(stage.to_string(), n_points, ms));
        }
        Stage::E2e => {
            let label = format!(
                "e2e {} ({} scans)",
                cfg.model.memory.placement,
                seq.scans().len()
            );
            let ms = run_model(&cfg.model, cfg.seed, &seq, stage, reps)?;
            rows.push(Timing::from_samples(label, n_points, ms));
            if cfg.model.is_recurrent() {
                let ms = run_model(&single_frame(&cfg.model), cfg.seed, &seq, stage, reps)?;
                rows.push(Timing::from_samples(
                    "e2e single frame".into(),
                    n_points,
                    ms,
                ));
            }
        }
    }
    Ok(rows)
}

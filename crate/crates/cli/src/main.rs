use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use recpillars_cli::bench::{cmd_bench, Stage};
use recpillars_cli::commands::{cmd_eval, cmd_infer, cmd_plot_bev, cmd_synth, cmd_train};
use recpillars_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "recpillars",
    version,
    about = "Recurrent pillar-based LiDAR object detection"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one configuration key, e.g. `--set train.loss.k_max=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train a model on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write detections for every sequence of a data directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render a sequence (and detections) as an SVG.
    PlotBev {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// SVG path; defaults to `<out>/bev.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time one stage of the pipeline.
    Bench {
        #[arg(long, default_value = "e2e")]
        stage: Stage,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.command {
        Command::Synth { count } => {
            let paths = cmd_synth(&cfg, count, &cli.out)?;
            println!("wrote {} sequences to {}", paths.len(), cli.out.display());
        }
        Command::Train { data, resume } => {
            let s = cmd_train(&cfg, &data, &cli.out, resume.as_deref())?;
            println!(
                "trained to step {} ({} skipped) -> {}",
                s.steps,
                s.skipped,
                s.checkpoint.display()
            );
            if let Some(l) = s.last {
                println!(
                    "last loss {:.5} (focal {:.5}, loc {:.5}, ang {:.5}, aux {:.5})",
                    l.total, l.focal, l.loc_size, l.angle, l.aux
                );
            }
        }
        Command::Eval { checkpoint, data } => {
            let r = cmd_eval(&cfg, &checkpoint, &data, &cli.out)?;
            print!("{}", r.to_text());
        }
        Command::Infer { checkpoint, data } => {
            let paths = cmd_infer(&cfg, &checkpoint, &data, &cli.out)?;
            println!(
                "wrote {} detection files to {}",
                paths.len(),
                cli.out.display()
            );
        }
        Command::PlotBev {
            sequence,
            detections,
            output,
        } => {
            let out = output.unwrap_or_else(|| cli.out.join("bev.svg"));
            cmd_plot_bev(&cfg, &sequence, detections.as_deref(), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Bench { stage, reps } => {
            for row in cmd_bench(&cfg, stage, reps)? {
                println!("{row}");
            }
        }
    }
    Ok(())
}

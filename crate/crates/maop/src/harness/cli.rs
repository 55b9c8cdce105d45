//! Command-line interface. Exit codes: 0 ok, 1 user error (bad arguments,
//! bad configuration, missing stage inputs), 2 internal error.

use super::config::PipelineConfig;
use super::pipeline::{self, MaskSource};
use crate::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "objdyn",
    version,
    about = "Self-supervised object-centric dynamics learning and planning on a built-in 2-D platformer"
)]
struct Cli {
    /// Configuration file (key = value); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset directory.
    #[arg(long, global = true, default_value = "dataset")]
    dataset: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate layouts and episodes for the k-to-m split.
    GenData,
    /// Level 1: write foreground masks for every training episode.
    DetectFg,
    /// Level 2: train the instance splitter + merging net, then persist the
    /// per-frame instance proposals.
    TrainSeg {
        /// Foreground source: pipeline | truth-gauss | truth-poisson.
        #[arg(long, default_value = "pipeline")]
        fg: String,
    },
    /// Level 3: train the object detector and effect nets.
    TrainDyn {
        /// Proposal source: pipeline | truth-gauss | truth-poisson.
        #[arg(long, default_value = "pipeline")]
        proposals: String,
    },
    /// Evaluate prediction metrics on the train and test splits.
    Eval {
        /// Also composite predicted frames and report object RMSE.
        #[arg(long)]
        with_frames: bool,
    },
    /// Autoregressive multi-step prediction with a side-by-side strip dump.
    Rollout {
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 5)]
        start: usize,
    },
    /// Monte Carlo tree search on an unseen layout.
    Plan {
        /// real | learned | random | all
        #[arg(long, default_value = "all")]
        model: String,
        /// Number of evaluation episodes (defaults to planner.eval_runs).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Identify the action-controlled object class on held-out episodes.
    DiscoverAgent,
    /// Dump foreground / segmentation / detector masks for one frame.
    DumpMasks {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 5)]
        frame: usize,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Dependency(_) | Error::NotReady(_) | Error::Io(_) => 1,
        Error::Shape(_) | Error::Numeric(_) => 2,
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage text; nonzero exit per contract.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(cli: Cli) -> crate::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seg.seed = seed ^ 0xa5;
        cfg.dynamics.seed = seed ^ 0xb6;
    }
    let (dataset, out) = (cli.dataset.as_path(), cli.out.as_path());
    match cli.cmd {
        Cmd::GenData => {
            pipeline::stage_gen_data(&cfg, dataset)?;
            println!("dataset written to {dataset:?}");
        }
        Cmd::DetectFg => {
            pipeline::stage_detect_fg(&cfg, dataset)?;
            println!("foreground masks written");
        }
        Cmd::TrainSeg { fg } => {
            let source = MaskSource::parse(&fg)?;
            let curve = pipeline::stage_train_seg(&cfg, dataset, out, source)?;
            println!(
                "segmentation trained: {} steps, loss {:.4} -> {:.4}",
                curve.len(),
                curve.first().unwrap_or(&0.0),
                curve.last().unwrap_or(&0.0)
            );
        }
        Cmd::TrainDyn { proposals } => {
            let source = MaskSource::parse(&proposals)?;
            let curve = pipeline::stage_train_dyn(&cfg, dataset, out, source)?;
            println!(
                "dynamics trained: {} steps, loss {:.4} -> {:.4}",
                curve.len(),
                curve.first().unwrap_or(&0.0),
                curve.last().unwrap_or(&0.0)
            );
        }
        Cmd::Eval { with_frames } => {
            let reports = pipeline::stage_eval(&cfg, dataset, out, with_frames)?;
            for r in &reports {
                println!(
                    "{}: agent 0-acc {:?}, all 2-acc {:?}, motion rmse {:?}",
                    r.split, r.agent_acc[0], r.all_acc[2], r.motion_rmse_all
                );
                if r.agent_acc[0].unwrap_or(0.0) < 0.5 {
                    println!("  note: low accuracy; is the checkpoint trained?");
                }
            }
            println!("reports in {:?}", out.join("metrics.json"));
        }
        Cmd::Rollout { steps, split, episode, start } => {
            let rollout = pipeline::stage_rollout(&cfg, dataset, out, &split, episode, start, steps)?;
            println!("rolled {} steps; strip in {:?}", rollout.len(), out.join("rollout"));
        }
        Cmd::Plan { model, episodes } => {
            if !["real", "learned", "random", "all"].contains(&model.as_str()) {
                return Err(Error::Config(format!("unknown planner model {model:?}")));
            }
            let results = pipeline::stage_plan(&cfg, dataset, out, &model, episodes)?;
            for (name, r) in &results {
                println!(
                    "{name}: reward {:.2}, win {:.0}%, lose {:.0}%, timeout {:.0}%",
                    r.mean_reward,
                    100.0 * r.win_rate,
                    100.0 * r.lose_rate,
                    100.0 * r.timeout_rate
                );
            }
            println!("report in {:?}", out.join("plan_report.csv"));
        }
        Cmd::DiscoverAgent => {
            let report = pipeline::stage_discover(&cfg, dataset, out)?;
            println!(
                "controllable class: {} (per-episode accuracy {:?})",
                report.discovered_class, report.accuracy
            );
        }
        Cmd::DumpMasks { split, episode, frame } => {
            pipeline::stage_dump_masks(&cfg, dataset, out, &split, episode, frame)?;
            println!("masks in {:?}", out.join("masks"));
        }
    }
    Ok(())
}

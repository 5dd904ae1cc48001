use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reg2rg::config::{Preset, RunConfig};
use reg2rg::pipeline::{Pipeline, RunLock, StageReport};
use reg2rg::{Error, Result};

#[derive(Parser)]
#[command(name = "reg2rg", version, about = "Region-guided report generation for volumetric scans")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration, layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "REG2RG_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Turns a component off: geometry, global, rra or lfd. Repeatable.
    #[arg(long, global = true)]
    ablate: Vec<String>,
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "paper-scale"])]
    preset: String,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset into the run's data directory.
    Synth,
    /// Prepare and cache encoder inputs for every manifest record.
    Preprocess,
    /// Train the model.
    Train {
        /// Continue from checkpoints/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Generate reports for the evaluation records.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score generated reports.
    Evaluate,
    /// Write the length-distribution plot and table.
    Plot,
    /// Run every stage in order.
    All,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let preset: Preset = c.preset.parse()?;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    for a in &c.ablate {
        cfg.train.flags.ablate(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<StageReport>> {
    let cfg = load_config(&cli.common)?;
    let run_dir = cfg
        .run_dir
        .clone()
        .ok_or_else(|| Error::Config("no run directory: pass --run-dir or set run_dir".into()))?;
    let pipeline = Pipeline::new(cfg, run_dir)?;
    let _lock = RunLock::acquire(&pipeline.run)?;
    let force = cli.common.force;
    Ok(match cli.command {
        Command::Synth => vec![pipeline.synth(force)?],
        Command::Preprocess => vec![pipeline.preprocess(force)?],
        Command::Train { resume } => vec![pipeline.train(force, resume)?],
        Command::Generate { checkpoint } => vec![pipeline.generate(checkpoint.as_deref(), force)?],
        Command::Evaluate => vec![pipeline.evaluate(force)?],
        Command::Plot => vec![pipeline.plot(force)?],
        Command::All => pipeline.all(force)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(reports) => {
            for r in reports {
                println!("{}\t{:?}\t{}", r.stage, r.status, r.manifest.output_hash);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

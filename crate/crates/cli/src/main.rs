use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use railpatch::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "railpatch", version, about = "Obstacle detection on railway tracks with limited-receptive-field networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or composite) a dataset and write it under <out>/dataset.
    Synth(Common),
    /// Train the configured method.
    Train(Common),
    /// Score the evaluation set and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint of the scoring network, overriding the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every patch size of the ablation block.
    Ablate(Common),
    /// Print the reports found in the output directory.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = output_dir(self.out.as_deref(), cfg.out.as_deref())?;
        Ok((cfg, out))
    }
}

fn output_dir(flag: Option<&Path>, configured: Option<&Path>) -> Result<PathBuf> {
    let Some(out) = flag.or(configured) else {
        bail!("no output directory: pass --out or set `out` in the config");
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let (cfg, out) = c.load()?;
            let s = experiment::cmd_synth(&cfg, &out)?;
            println!(
                "wrote {}: {} train scenes, {} eval scenes ({} with obstacle), {} non-railway images",
                s.dataset_dir.display(),
                s.train_scenes,
                s.eval_scenes,
                s.eval_with_obstacle,
                s.nonrail_images
            );
        }
        Command::Train(c) => {
            let (cfg, out) = c.load()?;
            for path in experiment::cmd_train(&cfg, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = common.load()?;
            let report = experiment::cmd_eval(&cfg, &out, checkpoint.as_deref())?;
            print!("{}", experiment::report_text(&report));
        }
        Command::Ablate(c) => {
            let (cfg, out) = c.load()?;
            print!("{}", experiment::cmd_ablate(&cfg, &out)?.text);
        }
        Command::Report { config, out } => {
            let configured = match &config {
                Some(p) => ExperimentConfig::from_file(p)?.out,
                None => None,
            };
            let out = output_dir(out.as_deref(), configured.as_deref())?;
            print!("{}", experiment::cmd_report(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

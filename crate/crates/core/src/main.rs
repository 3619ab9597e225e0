use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lifelong_depth::image::Mode;
use lifelong_depth::runner::{self, Method, RunConfig};
use lifelong_depth::Result;

#[derive(Parser)]
#[command(name = "lifelong-depth", version, about = "Online unsupervised depth learning over a stream of synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// ft, reg, rep or prop.
    #[arg(long)]
    method: Option<Method>,
    /// stereo or sfm.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch on the pretraining domains.
    Pretrain(Common),
    /// Single pass over the online stream; resumes from `<out>/resume` if present.
    Online {
        #[command(flatten)]
        common: Common,
        /// Directory written by `pretrain`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a saved state on every held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `state.bin` and `state.txt`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate finished online runs into summary tables and curves.
    Report {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Online run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.method {
        cfg.method = m;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = config(&c)?;
            let o = runner::pretrain(&cfg, &c.out)?;
            println!("pretrained {} steps, {} samples admitted to replay", o.losses.len(), o.stored);
        }
        Command::Online { common, pretrained } => {
            let mut cfg = config(&common)?;
            if pretrained.is_some() {
                cfg.pretrain_dir = pretrained;
            }
            let o = runner::online(&cfg, &common.out)?;
            let state = if o.completed { "finished" } else { "stopped" };
            println!("{state} after {} online steps, {} evaluations", o.steps, o.report.rows.len());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = config(&common)?;
            let row = runner::evaluate(&cfg, &checkpoint, &common.out)?;
            if let Some(m) = row.current_dist {
                println!("current distribution: AbsRel {:.4}, RMSE {:.4}", m.abs_rel, m.rmse);
            }
            if let Some(m) = row.cross_dist {
                println!("cross distribution: AbsRel {:.4}, RMSE {:.4}", m.abs_rel, m.rmse);
            }
        }
        Command::Report { out, runs } => {
            let s = runner::report(&runs, &out)?;
            println!("summarized {} runs into {}", s.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line workflows: synthesize data, train, evaluate, explain and
//! score single visits.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use psonet_core::dataio::AssemblyMode;
use psonet_core::pasi::Region;

pub use commands::{cmd_eval, cmd_explain, cmd_infer, cmd_synth, cmd_train};
pub use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "psonet", version, about = "Multi-image PASI scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// low_res or four_crop.
    #[arg(long)]
    pub mode: Option<AssemblyMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, manifest: Option<PathBuf>) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            epochs: self.epochs,
            out: self.out.clone(),
            manifest,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known labels.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from state.ckpt in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the evaluation split and report agreement with raters.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Extra rater table as NAME=PATH (CSV `subject_id,score`).
        #[arg(long = "rater", value_parser = parse_rater)]
        raters: Vec<(String, PathBuf)>,
        /// Use the manifest labels as a rater named `truth`.
        #[arg(long)]
        truth: bool,
    },
    /// Write Grad-RAM overlays for the top-ranked images of a visit.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Visit key `<patient>/<visit>`.
        #[arg(long)]
        visit: String,
        /// HN, UE, LE, TR, or all.
        #[arg(long, default_value = "all")]
        region: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score a folder laid out as `<dir>/{HN,UE,LE,TR}/*.png`.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        dir: PathBuf,
    },
}

fn parse_rater(s: &str) -> Result<(String, PathBuf), String> {
    s.split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
        .ok_or_else(|| format!("{s:?} is not NAME=PATH"))
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> psonet_core::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = config::load(common.config.as_deref(), &common.overrides(None))?;
            cmd_synth(&cfg)?;
        }
        Command::Train {
            common,
            manifest,
            resume,
        } => {
            let cfg = config::load(common.config.as_deref(), &common.overrides(manifest))?;
            cmd_train(&cfg, resume)?;
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            raters,
            truth,
        } => {
            let mut cfg = config::load(common.config.as_deref(), &common.overrides(manifest))?;
            cfg.eval.truth_as_rater |= truth;
            cfg.eval.raters.extend(
                raters
                    .into_iter()
                    .map(|(name, path)| config::RaterSpec { name, path }),
            );
            cmd_eval(&cfg, &checkpoint)?;
        }
        Command::Explain {
            common,
            checkpoint,
            manifest,
            visit,
            region,
            top_k,
        } => {
            let mut cfg = config::load(common.config.as_deref(), &common.overrides(manifest))?;
            if let Some(k) = top_k {
                if k == 0 {
                    return Err(psonet_core::Error::validation("top_k", "must be positive"));
                }
                cfg.explain.top_k = k;
            }
            let region = match region.as_str() {
                "all" => None,
                code => Some(code.parse::<Region>()?),
            };
            cmd_explain(&cfg, &checkpoint, &visit, region)?;
        }
        Command::Infer {
            common,
            checkpoint,
            dir,
        } => {
            let cfg = config::load(common.config.as_deref(), &common.overrides(None))?;
            cmd_infer(&cfg, &checkpoint, &dir)?;
        }
    }
    Ok(())
}

/// Process exit code for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(err: &psonet_core::Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

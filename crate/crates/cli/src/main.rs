//! `wran`: generate synthetic data, run the training stages one at a time
//! from checkpoints, evaluate, and check the minimax identity numerically.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wran::pipeline::Predictor;

use commands::AdaptFlags;
use config::{Mode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "wran", version, about = "Weighted relation adversarial adaptation")]
struct Cli {
    /// `key=value` config file with `[train]`, `[encoder]`, `[corpus]`, `[kg]`,
    /// `[eval]` and `[theory]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` setting; repeatable, overrides the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed; overrides WRAN_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Task family; otherwise taken from the config or the data directory.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Io {
    /// Data directory written by `gen` [default: <out dir>/data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointIo {
    /// Input checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    io: Io,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Target,
    Source,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (re) or graph (kgc).
    Gen {
        /// Output directory [default: <out dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: train the source encoder and classifier.
    Pretrain(Io),
    /// Stages 2 and 3: relation weights, instance weights and the gate.
    Weights(CheckpointIo),
    /// Stage 4: weighted adversarial adaptation, then optional fine-tuning.
    Adapt {
        #[command(flatten)]
        io: CheckpointIo,
        /// Drop relation weights (alpha = 1).
        #[arg(long)]
        no_relation_weights: bool,
        /// Drop instance weights (alpha = 0).
        #[arg(long)]
        no_instance_weights: bool,
        /// Replace the gate by a fixed alpha.
        #[arg(long)]
        no_gate: bool,
        /// Alpha used with --no-gate [default: 0.5].
        #[arg(long, requires = "no_gate")]
        fixed_alpha: Option<f64>,
        /// Weight of the semantic alignment term.
        #[arg(long)]
        sm_coeff: Option<f64>,
        /// Share of the labeled target pool used for fine-tuning after
        /// adaptation [default: 0 for re, 1 for kgc].
        #[arg(long)]
        fine_tune_frac: Option<f64>,
    },
    /// Evaluate a checkpoint on the test split and write metrics.csv.
    Eval {
        #[command(flatten)]
        io: CheckpointIo,
        /// Encoder/classifier pair to evaluate.
        #[arg(long, value_enum, default_value = "target")]
        predictor: Which,
    },
    /// Numerical checks of the optimal weighted discriminator and minimax value.
    Theory {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    let mode = cli.mode;
    let data = |p: Option<PathBuf>| cfg.path(p, "data", "data");
    match cli.command {
        Command::Gen { out } => commands::gen(&cfg, mode, &cfg.path(out, "data", "output")?),
        Command::Pretrain(io) => {
            commands::pretrain(&cfg, mode, &data(io.data)?, &cfg.path(io.out, "pretrain", "output")?)
        }
        Command::Weights(c) => commands::weights(
            &cfg,
            mode,
            &cfg.path(c.checkpoint, "pretrain", "checkpoint")?,
            &data(c.io.data)?,
            &cfg.path(c.io.out, "weights", "output")?,
        ),
        Command::Adapt {
            io,
            no_relation_weights,
            no_instance_weights,
            no_gate,
            fixed_alpha,
            sm_coeff,
            fine_tune_frac,
        } => commands::adapt(
            &cfg,
            mode,
            &cfg.path(io.checkpoint, "weights", "checkpoint")?,
            &data(io.io.data)?,
            &cfg.path(io.io.out, "adapt", "output")?,
            &AdaptFlags {
                no_relation_weights,
                no_instance_weights,
                no_gate,
                fixed_alpha,
                sm_coeff,
                fine_tune_frac,
            },
        ),
        Command::Eval { io, predictor } => commands::eval(
            &cfg,
            mode,
            &cfg.path(io.checkpoint, "adapt", "checkpoint")?,
            &data(io.io.data)?,
            &cfg.path(io.io.out, "eval", "output")?,
            match predictor {
                Which::Target => Predictor::Target,
                Which::Source => Predictor::SourceOnly,
            },
        ),
        Command::Theory { out } => commands::theory(&cfg, &cfg.path(out, "theory", "output")?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wran::pipeline::WeightMode;

    fn flags(r: bool, i: bool, g: bool, a: Option<f64>) -> AdaptFlags {
        AdaptFlags {
            no_relation_weights: r,
            no_instance_weights: i,
            no_gate: g,
            fixed_alpha: a,
            ..AdaptFlags::default()
        }
    }

    #[test]
    fn ablation_flags_map_to_weight_modes() {
        assert_eq!(flags(false, false, false, None).weight_mode().unwrap(), None);
        assert_eq!(
            flags(false, false, true, Some(0.5)).weight_mode().unwrap(),
            Some(WeightMode::FixedAlpha(0.5))
        );
        assert_eq!(flags(false, false, true, None).weight_mode().unwrap(), Some(WeightMode::FixedAlpha(0.5)));
        assert_eq!(flags(true, false, false, None).weight_mode().unwrap(), Some(WeightMode::NoRelation));
        assert_eq!(flags(false, true, false, None).weight_mode().unwrap(), Some(WeightMode::NoInstance));
        assert_eq!(flags(true, true, false, None).weight_mode().unwrap(), Some(WeightMode::Uniform));
        assert!(flags(true, false, true, None).weight_mode().is_err());
        assert!(flags(false, false, false, Some(0.3)).weight_mode().is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["wran", "--seed", "3", "adapt", "--no-gate", "--fixed-alpha", "0.5"]).unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(Cli::try_parse_from(["wran", "adapt", "--fixed-alpha", "0.5"]).is_err());
    }
}

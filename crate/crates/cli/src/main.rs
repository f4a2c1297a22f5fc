mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fundus_fusion::evaluation::Metric;
use fundus_fusion::fusion::{HeadKind, Strategy};
use fundus_fusion::Error;

use crate::commands::{Ctx, TrainArgs};
use crate::config::RunConfig;
use crate::run::RunDir;

#[derive(Parser)]
#[command(name = "fundus-fusion", version, about = "Fundus image + demographic fusion experiments")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the split, training, evaluation and explanation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and bootstrap; 1 is the reference mode.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Intermediate,
    Prediction,
    Late,
    Voting,
    UnimodalFundus,
    UnimodalDemographic,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Intermediate => Strategy::Intermediate,
            StrategyArg::Prediction => Strategy::Prediction,
            StrategyArg::Late => Strategy::Late,
            StrategyArg::Voting => Strategy::Voting,
            StrategyArg::UnimodalFundus => Strategy::UnimodalFundus,
            StrategyArg::UnimodalDemographic => Strategy::UnimodalDemographic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Fcnn,
    GradientBoostedTrees,
    SupportVectorMachine,
    SoftVote,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Fcnn => HeadKind::Fcnn,
            HeadArg::GradientBoostedTrees => HeadKind::GradientBoostedTrees,
            HeadArg::SupportVectorMachine => HeadKind::SupportVectorMachine,
            HeadArg::SoftVote => HeadKind::SoftVote,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate (if synthetic) and split the cohort by patient.
    Split,
    /// Train or fit one system and save it under systems/<name>.
    Train {
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Prerequisite fundus system (name in this run or a directory).
        #[arg(long)]
        fundus: Option<PathBuf>,
        #[arg(long)]
        demographic: Option<PathBuf>,
        #[arg(long)]
        intermediate: Option<PathBuf>,
    },
    /// Grid search over learning rates, feature widths and image sizes.
    Sweep,
    /// Bootstrap evaluation of a trained system on the test subset.
    Eval {
        #[arg(long)]
        model: String,
    },
    /// Paired bootstrap comparison of two evaluated systems.
    Compare {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Comma-separated metrics; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        metric: Option<Vec<String>>,
    },
    /// Grad-CAM maps for randomly chosen positive test images.
    Explain {
        #[arg(long)]
        model: String,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Combined tables and plots over every evaluated system.
    Report,
    /// Print the configuration with every default filled in.
    Defaults,
}

/// 1 for bad input or missing prerequisites, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config { .. }
                | Error::Shape { .. }
                | Error::NotFitted(_)
                | Error::MissingArtifact(_)
                | Error::TestSplitAccess { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.workers);
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(&cli)?;
    if let Command::Defaults = cli.command {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    if let Command::Train {
        fundus,
        demographic,
        intermediate,
        ..
    } = &cli.command
    {
        let p = &mut config.fusion.prerequisites;
        for (slot, v) in [(&mut p.fundus, fundus), (&mut p.demographic, demographic), (&mut p.intermediate, intermediate)] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
    }
    config.validate()?;
    let ctx = Ctx {
        config,
        run: RunDir { root: cli.run_dir.clone() },
    };
    std::fs::create_dir_all(&ctx.run.root)?;
    match cli.command {
        Command::Split => commands::split(&ctx),
        Command::Train {
            name, strategy, head, ..
        } => commands::train_cmd(
            &ctx,
            &TrainArgs {
                name,
                strategy: strategy.map(Into::into),
                head: head.map(Into::into),
            },
        ),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::Eval { model } => commands::eval_cmd(&ctx, &model),
        Command::Compare { a, b, metric } => {
            let metrics = metric
                .map(|v| v.iter().map(|m| m.parse::<Metric>()).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            commands::compare_cmd(&ctx, &a, &b, metrics)
        }
        Command::Explain { model, count } => commands::explain_cmd(&ctx, &model, count),
        Command::Report => commands::report_cmd(&ctx),
        Command::Defaults => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

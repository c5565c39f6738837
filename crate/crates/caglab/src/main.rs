//! Experiment front-end: one config file drives suite generation, data
//! collection, training, evaluation, sweeps, and the report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use caglab::config::ExperimentConfig;
use caglab::eval::AblationMode;
use caglab::guidance::Wiring;
use caglab::pipeline::{
    cmd_collect, cmd_eval, cmd_gen, cmd_report, cmd_sweep, cmd_train, Branch, PipelineError,
};

#[derive(Parser)]
#[command(name = "caglab", version, about = "Counterfactual action guidance laboratory")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for collection and evaluation; results are identical
    /// for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Cond,
    Va,
    Dropout,
}

impl From<BranchArg> for Branch {
    fn from(value: BranchArg) -> Self {
        match value {
            BranchArg::Cond => Branch::Cond,
            BranchArg::Va => Branch::Va,
            BranchArg::Dropout => Branch::Dropout,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WiringArg {
    Baseline,
    Tf,
    Va,
    DropoutShared,
}

impl From<WiringArg> for Wiring {
    fn from(value: WiringArg) -> Self {
        match value {
            WiringArg::Baseline => Wiring::Baseline,
            WiringArg::Tf => Wiring::Tf,
            WiringArg::Va => Wiring::Va,
            WiringArg::DropoutShared => Wiring::DropoutShared,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    VisionAndLanguage,
    VisionOnly,
    LanguageOnly,
}

impl From<ModeArg> for AblationMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::VisionAndLanguage => AblationMode::VisionAndLanguage,
            ModeArg::VisionOnly => AblationMode::VisionOnly,
            ModeArg::LanguageOnly => AblationMode::LanguageOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the counterfactual suites and the manifest.
    Gen,
    /// Collect the biased demonstration dataset and run the replay audit.
    Collect,
    /// Train one policy branch.
    Train {
        #[arg(long, value_enum)]
        branch: BranchArg,
    },
    /// Evaluate one wiring under one input-ablation mode.
    Eval {
        #[arg(long, value_enum)]
        wiring: WiringArg,
        #[arg(long, value_enum, default_value = "vision-and-language")]
        mode: ModeArg,
    },
    /// Run the guidance-scale sweep.
    Sweep,
    /// Compose the summary document from previously written CSVs.
    Report,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(PipelineError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    }
    let mut config =
        ExperimentConfig::load(&cli.config).map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        config.base_seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    match cli.command {
        Command::Gen => cmd_gen(&config),
        Command::Collect => cmd_collect(&config),
        Command::Train { branch } => cmd_train(&config, branch.into()),
        Command::Eval { wiring, mode } => cmd_eval(&config, wiring.into(), mode.into()),
        Command::Sweep => cmd_sweep(&config),
        Command::Report => cmd_report(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

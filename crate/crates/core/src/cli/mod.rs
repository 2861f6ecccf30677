//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 file or format
//! error, 3 numeric failure.

mod commands;
mod config;
pub mod selfcheck;

pub use commands::{
    cmd_eval, cmd_generate, cmd_predict, cmd_selfcheck, cmd_sweep, cmd_train, LoadedModels,
    PredictorKind,
};
pub use config::{
    DataBlock, GridBlock, ModelBlock, PathsBlock, RecurrentBlock, RunConfig, SeedSource,
    SweepBlock, TrainBlock, SEED_ENV,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::SweepAxis;
use crate::model::ConditioningMode;
use crate::tensor::Fault;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Parametric,
    Observation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Doppler,
    Horizon,
}

#[derive(Parser, Debug)]
#[command(
    name = "otfs-predict",
    version,
    about = "Delay-Doppler channel datasets, CVAE channel prediction and NMSE sweeps"
)]
struct Cli {
    /// TOML run configuration overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides DDCP_SEED and every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Start from the 8x8x4 desk preset instead of full scale.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Conditioning mode of a model being trained.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a DDCP dataset.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the CVAE or the recurrent baseline on the training split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cvae")]
        predictor: PredictorKind,
    },
    /// Per-sample predictions and NMSE on the test split.
    Predict {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        recurrent: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        #[arg(long, value_enum, default_value = "cvae")]
        predictor: PredictorKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NMSE report of several predictors on the test split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        recurrent: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Repeatable; defaults to every available predictor.
        #[arg(long, value_enum)]
        predictor: Vec<PredictorKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NMSE versus Doppler or horizon on regenerated test sets.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        recurrent: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Vec<PredictorKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, flow, KL and channel-statistics checks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a pool may already exist when called in-process more than once
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    if let Command::Selfcheck { inject_fault } = cli.command {
        return cmd_selfcheck(inject_fault.then_some(Fault::TanhDerivative));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.desk_scale)?;
    if let Some(m) = cli.mode {
        cfg.model.mode = match m {
            ModeArg::Parametric => ConditioningMode::Parametric,
            ModeArg::Observation => ConditioningMode::Observation,
        };
        cfg.validate()?;
    }
    let env = std::env::var(SEED_ENV).ok();
    let source = cfg.apply_seed(cli.seed, env.as_deref())?;
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Generate { out } => cmd_generate(&cfg, &out.unwrap_or(paths.data), source),
        Command::Train {
            data,
            out,
            predictor,
        } => {
            let default_out = match predictor {
                PredictorKind::Recurrent => paths.recurrent,
                _ => paths.model,
            };
            cmd_train(
                &cfg,
                &data.unwrap_or(paths.data),
                &out.unwrap_or(default_out),
                predictor,
                source,
            )
        }
        Command::Predict {
            data,
            model,
            recurrent,
            delta,
            predictor,
            out,
        } => {
            let (models, _) = LoadedModels::load(
                &[predictor],
                &model.unwrap_or(paths.model),
                &recurrent.unwrap_or(paths.recurrent),
            )?;
            cmd_predict(
                &cfg,
                &data.unwrap_or(paths.data),
                &models,
                predictor,
                delta,
                &out.unwrap_or(paths.predictions),
            )
        }
        Command::Eval {
            data,
            model,
            recurrent,
            delta,
            predictor,
            out,
        } => {
            let (models, kinds) = LoadedModels::load(
                &predictor,
                &model.unwrap_or(paths.model),
                &recurrent.unwrap_or(paths.recurrent),
            )?;
            cmd_eval(
                &cfg,
                &data.unwrap_or(paths.data),
                &models,
                &kinds,
                delta,
                &out.unwrap_or(paths.report),
                source,
            )
        }
        Command::Sweep {
            axis,
            model,
            recurrent,
            predictor,
            out,
        } => {
            let axis = match axis {
                Some(AxisArg::Doppler) => SweepAxis::DopplerHz,
                Some(AxisArg::Horizon) => SweepAxis::HorizonFrames,
                None => cfg.sweep_axis()?,
            };
            let (models, kinds) = LoadedModels::load(
                &predictor,
                &model.unwrap_or(paths.model),
                &recurrent.unwrap_or(paths.recurrent),
            )?;
            cmd_sweep(
                &cfg,
                axis,
                &models,
                &kinds,
                &out.unwrap_or(paths.report),
                source,
            )
        }
        Command::Selfcheck { .. } => unreachable!("handled above"),
    }
}

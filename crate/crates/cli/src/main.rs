use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use impactx_cli::config::ExperimentConfig;
use impactx_cli::pipeline::{self, Phase, PhaseError};
use impactx_cli::{exit_code, export, report};
use impactx_core::Error;

#[derive(Parser)]
#[command(
    name = "impactx",
    version,
    about = "Train and evaluate explanation-guided classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Stage1,
    Cache,
    Stage2,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run training and evaluation phases, resuming finished ones.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write input, decoder and optional external maps of test samples as PGM.
    ExportMaps {
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the trained model.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Also write a partition attribution of the fused classifier.
        #[arg(long)]
        external: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracies and mean AOPC of a finished run directory.
    Report { dir: PathBuf },
}

fn load(
    path: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<ExperimentConfig, PhaseError> {
    let mut config = ExperimentConfig::load(path).map_err(|e| PhaseError::new("setup", e))?;
    if let Some(seed) = seed {
        config.set_seed(seed);
    }
    if let Some(workers) = workers {
        config.workers = workers;
    }
    Ok(config)
}

fn execute(command: Command) -> Result<(), PhaseError> {
    match command {
        Command::Run {
            config,
            phase,
            seed,
            workers,
            out,
        } => {
            let config = load(&config, seed, workers)?;
            let out =
                pipeline::output_dir(&config, out).map_err(|e| PhaseError::new("setup", e))?;
            let phases = match phase {
                PhaseArg::Stage1 => vec![Phase::Stage1],
                PhaseArg::Cache => vec![Phase::Cache],
                PhaseArg::Stage2 => vec![Phase::Stage2],
                PhaseArg::Eval => vec![Phase::Eval],
                PhaseArg::All => Phase::ALL.to_vec(),
            };
            let outcome = pipeline::run(&config, &out, &phases)?;
            for p in outcome.executed {
                println!("{p}: done");
            }
            for p in outcome.skipped {
                println!("{p}: already complete");
            }
            Ok(())
        }
        Command::ExportMaps {
            config,
            run,
            n,
            external,
            out,
        } => {
            let phase = |e| PhaseError::new("export-maps", e);
            let config = load(&config, None, None)?;
            if !pipeline::is_trained(&run) {
                return Err(phase(Error::State(format!(
                    "{} holds no trained model",
                    run.display()
                ))));
            }
            let model = pipeline::load_model(&config, &run.join(pipeline::MODEL_CHECKPOINT))
                .map_err(phase)?;
            let (train, test) = pipeline::load_data(&config).map_err(phase)?;
            let masker = pipeline::masker_for(&config, &train).map_err(phase)?;
            let external = external.then_some((&masker, config.eval.shap_budget));
            let meta = pipeline::artifact_meta(&config);
            let files =
                export::export_maps(&model, &test, n, external, &out, &meta).map_err(phase)?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
        Command::Report { dir } => {
            let summary = report::summarize(&dir).map_err(|e| PhaseError::new("report", e))?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e.source) as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scaleadapt::cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_report, cmd_resample_bench, cmd_train, CliError,
    ExperimentConfig, EXIT_RUN,
};

/// Scale-aware adversarial domain adaptation experiments on synthetic
/// overhead imagery.
#[derive(Parser)]
#[command(name = "scaleadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the command's output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target/eval datasets.
    GenData(Common),
    /// Train one model per the [train] table.
    Train(Common),
    /// Run the seven-row ablation matrix.
    Ablate(Common),
    /// Run the seven-row resampling benchmark matrix.
    ResampleBench(Common),
    /// Evaluate a checkpoint on the eval dataset.
    Eval(Common),
    /// Render report files from a completed training run.
    Report(Common),
}

fn dispatch(cmd: &Command) -> Result<String, CliError> {
    let common = match cmd {
        Command::GenData(c)
        | Command::Train(c)
        | Command::Ablate(c)
        | Command::ResampleBench(c)
        | Command::Eval(c)
        | Command::Report(c) => c,
    };
    let cfg = ExperimentConfig::load(&common.config)?;
    match cmd {
        Command::GenData(c) => {
            let m = cmd_gen_data(&cfg, c.force)?;
            Ok(format!(
                "datasets written to {} (theta {} m, sigma {} m)",
                cfg.data_dir().display(),
                m.theta_gsd_m,
                m.sigma_gsd_m
            ))
        }
        Command::Train(c) => {
            let o = cmd_train(&cfg, c.seed, c.out.clone(), c.force)?;
            Ok(format!(
                "trained {} iterations, best mIoU {}",
                o.iters_run,
                o.best_miou.map_or("n/a".into(), |m| format!("{:.2}%", m * 100.0))
            ))
        }
        Command::Ablate(c) => {
            let r = cmd_ablate(&cfg, c.out.clone(), c.force)?;
            Ok(r.render_markdown("Ablation"))
        }
        Command::ResampleBench(c) => {
            let r = cmd_resample_bench(&cfg, c.out.clone(), c.force)?;
            Ok(r.render_markdown("Resampling benchmark"))
        }
        Command::Eval(c) => {
            let r = cmd_eval(&cfg, c.out.clone(), c.force)?;
            Ok(serde_json::to_string_pretty(&r).map_err(|e| CliError::Run(e.to_string()))?)
        }
        Command::Report(c) => {
            let p = cmd_report(&cfg, c.out.clone(), c.force)?;
            Ok(format!("report written to {}", p.report_md.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_RUN as u8))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geofence_core::config::RunConfig;
use geofence_core::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "geofence-guard", version, about = "Geofence safety-filter pipeline driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (INI).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Plant rollouts, derivatives, mirroring and split manifest.
    Generate,
    /// Refine tire parameters on the training split.
    Calibrate,
    /// Train the configured model variant.
    Train,
    /// Closed-loop episodes on sampled scenarios.
    Simulate,
    /// Metrics from the episode summaries.
    Evaluate,
    /// Control-linearity error on test states.
    Linearity,
}

fn load(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let path = cli.config.clone().ok_or_else(|| {
        PipelineError::Config(geofence_core::config::ConfigError::Invalid("--config is required".into()))
    })?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<String> {
    let cfg = load(cli)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| PipelineError::Fs(format!("{}: {e}", cfg.output.display())))?;
    Ok(match cli.command {
        Command::Generate => {
            let s = pipeline::cmd_generate(&cfg)?;
            format!(
                "{} trajectories, {} samples, split {}/{}/{}",
                s.trajectories, s.samples, s.split_sizes[0], s.split_sizes[1], s.split_sizes[2]
            )
        }
        Command::Calibrate => {
            let p = pipeline::cmd_calibrate(&cfg)?;
            format!("c_f {:.1} c_r {:.1} c_shape {:.4} e_curv {:.4}", p.c_f, p.c_r, p.c_shape, p.e_curv)
        }
        Command::Train => {
            let s = pipeline::cmd_train(&cfg)?;
            format!(
                "test rmse {:.5} (analytical {:.5}), best epoch {} of {}",
                s.test_rmse, s.baseline_rmse, s.best_epoch, s.epochs_run
            )
        }
        Command::Simulate => {
            let s = pipeline::cmd_simulate(&cfg)?;
            let breaches = s.iter().filter(|e| e.breach).count();
            format!("{} episodes, {} breaches", s.len(), breaches)
        }
        Command::Evaluate => pipeline::cmd_evaluate(&cfg)?.to_text().trim_end().to_string(),
        Command::Linearity => {
            let r = pipeline::cmd_linearity(&cfg)?;
            format!("{} records", r.len())
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}

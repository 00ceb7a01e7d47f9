use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffaug::experiment::{self, ExperimentConfig, ExperimentError};

/// Exit code for a run that stopped on a non-finite loss or gradient.
const EXIT_NON_FINITE: u8 = 2;
/// Exit code for invalid arguments or configuration.
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "diffaug", version, about = "Train and evaluate GANs with differentiable augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// `key=value` applied on top of the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run(ConfigArgs),
    /// Train once per value of the config's sweep axis.
    Sweep(ConfigArgs),
    /// Render latent interpolation strips from a checkpoint's EMA generator.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            let r = experiment::run(&cfg, Some(&out))?;
            println!("best_proxy_fid {} at step {}", r.best_proxy_fid, r.best_step);
        }
        Command::Sweep(args) => {
            let (cfg, out) = load(&args)?;
            let (csv, _) = experiment::sweep(&cfg, Some(&out))?;
            print!("{csv}");
        }
        Command::Interpolate {
            checkpoint,
            pairs,
            steps,
            seed,
            out,
        } => {
            for p in experiment::interpolate(&checkpoint, pairs, steps, seed, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                ExperimentError::Config(_) => EXIT_USAGE,
                e if e.is_non_finite_halt() => EXIT_NON_FINITE,
                _ => 1,
            };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

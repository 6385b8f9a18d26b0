use std::path::PathBuf;
use std::process::ExitCode;

use aren::degrade::{DegradeKind, DegradeSpec};
use aren_cli::config::Overrides;
use aren_cli::restore::RestoreRequest;
use aren_cli::{corrupt, eval, inspect, restore, train, CliError, TaskKind};
use clap::{ArgGroup, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aren", version, about = "Attentive VQ-VAE for image reconstruction and restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints and logs go to the output dir.
    Train {
        #[command(flatten)]
        run: Overrides,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the degradation sweep for a task on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: Overrides,
        /// Sweep to run; defaults to the checkpoint's task.
        #[arg(long, value_enum)]
        sweep: Option<TaskKind>,
    },
    /// Reconstruct one already-degraded image.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Mask image (white = kept); overrides the input's alpha channel.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskKind>,
    },
    /// Apply one degradation to an image.
    #[command(group(ArgGroup::new("kind").required(true).args(["mask", "noise", "blur"])))]
    Corrupt {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Fraction of pixels to drop.
        #[arg(long, allow_negative_numbers = true)]
        mask: Option<f64>,
        /// Noise standard deviation as a fraction of the value range.
        #[arg(long, allow_negative_numbers = true)]
        noise: Option<f64>,
        /// Blur sigmas `sx,sy` in pixels.
        #[arg(long, value_parser = parse_pair::<f64>)]
        blur: Option<(f64, f64)>,
        /// Blur kernel size `kx,ky`, both odd.
        #[arg(long, value_parser = parse_pair::<usize>, default_value = "3,15")]
        ksize: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print per-module parameter counts of the configured model.
    Inspect {
        #[command(flatten)]
        run: Overrides,
        /// Also time this many training steps.
        #[arg(long, default_value_t = 0)]
        time_steps: usize,
    },
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("cannot parse `{v}`"));
    Ok((parse(a)?, parse(b)?))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let summary = train::run_train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps; MAE/sigma {:.4}; checkpoint {}",
                summary.steps,
                summary.final_mae_over_sigma,
                train::checkpoint_path(&cfg).display()
            );
        }
        Command::Eval { checkpoint, run, sweep } => {
            for r in eval::run_eval(&checkpoint, &run, sweep)? {
                println!(
                    "{} {}: psnr {:.4} dB, ssim {:.6}, mae/sigma {:.6}, n {}",
                    r.task, r.param, r.psnr_db, r.ssim, r.mae_over_sigma, r.n_images
                );
            }
        }
        Command::Restore {
            checkpoint,
            input,
            output,
            mask,
            task,
        } => {
            restore::run_restore(&RestoreRequest {
                checkpoint,
                input,
                output,
                mask,
                task,
            })?;
        }
        Command::Corrupt {
            input,
            output,
            mask,
            noise,
            blur,
            ksize,
            seed,
        } => {
            let kind = match (mask, noise, blur) {
                (Some(fraction), _, _) => DegradeKind::Mask { fraction },
                (_, Some(sigma_frac), _) => DegradeKind::Noise { sigma_frac },
                (_, _, Some(sigma)) => DegradeKind::Blur { sigma, ksize },
                _ => unreachable!("clap requires one degradation"),
            };
            corrupt::run_corrupt(&input, &output, &DegradeSpec { kind, seed })?;
        }
        Command::Inspect { run, time_steps } => {
            let cfg = run.resolve()?;
            print!("{}", inspect::inspect(&cfg, time_steps)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

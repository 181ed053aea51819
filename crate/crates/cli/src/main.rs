use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colourgan_cli::commands;
use colourgan_cli::{CliError, NormSchedule, Overrides};

#[derive(Parser)]
#[command(name = "colourgan", version, about = "Conditional GAN image colourisation in Lab space")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the L1 reconstruction term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Discriminator scales.
    #[arg(long)]
    scales: Option<usize>,
    /// ibn, bn or in.
    #[arg(long)]
    norm_schedule: Option<NormSchedule>,
    /// Dataset root with one sub-directory per class.
    #[arg(long, env = "COLOURGAN_DATA")]
    data_root: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            image_size: self.image_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            scales: self.scales,
            norm_schedule: self.norm_schedule,
            data_root: self.data_root.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing a new run directory under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Continue from a checkpoint in an existing run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Colourise grayscale or colour images with a trained generator.
    Colorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "colourised")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint on its run's held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate on a different dataset instead of the run's test split.
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Chrominance histograms of a set of images or directories.
    Histogram {
        #[arg(long, default_value = "histogram")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and evaluate several configs and tabulate the results.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Train { run, out, resume } => {
            let outcome = commands::cmd_train(run.config.as_deref(), &run.overrides(), &out, resume.as_deref())?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Colorize { checkpoint, out, inputs } => {
            for p in commands::cmd_colorize(&checkpoint, &inputs, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { checkpoint, out, data_root } => {
            let outcome = commands::cmd_evaluate(&checkpoint, out.as_deref(), data_root.as_deref())?;
            println!("{}", outcome.dir.display());
        }
        Command::Histogram { out, inputs } => {
            commands::cmd_histogram(&inputs, &out)?;
            println!("{}", out.display());
        }
        Command::Compare { run, out, configs } => {
            if run.config.is_some() {
                return Err(CliError::Usage("compare takes configs as positional arguments".into()));
            }
            let outcome = commands::cmd_compare(&configs, &run.overrides(), &out)?;
            println!("{}", outcome.dir.display());
            if !outcome.failures.is_empty() {
                let e = CliError::Partial {
                    failed: outcome.failures.len(),
                    total: configs.len(),
                };
                eprintln!("error: {e}");
                return Ok(e.exit_code());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

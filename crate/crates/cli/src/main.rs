use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdfm::experiment::{
    cmd_bench, cmd_distill, cmd_eval, cmd_sweep, cmd_train_teacher, ExperimentConfig, SweepAxis, BENCH_DEFAULT_REPS,
};
use kdfm::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kdfm", version, about = "Knowledge distillation with feature maps")]
struct Cli {
    /// Log per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Override a config field by dotted path, e.g. `distill.t=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set schedule.seed=N`.
    #[arg(long)]
    seed: Option<u64>,

    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("schedule.seed={seed}"));
        }
        let mut cfg = ExperimentConfig::load(&self.config, &overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the teacher with cross-entropy.
    TrainTeacher(ConfigArgs),
    /// Train a student with the configured method.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint from `train-teacher`.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Run `distill` once per value of one axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// One of t, lambda, alpha, depth, params.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Test accuracy of a student or teacher checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Single-image inference latency of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = BENCH_DEFAULT_REPS)]
        reps: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(args) => {
            let out = cmd_train_teacher(&args.load()?)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("test_accuracy {}", out.summary.final_test_accuracy);
        }
        Command::Distill { config, teacher } => {
            let out = cmd_distill(&config.load()?, &teacher)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("test_accuracy {}", out.summary.final_test_accuracy);
        }
        Command::Sweep {
            config,
            teacher,
            axis,
            values,
        } => {
            println!("value,test_accuracy");
            for row in cmd_sweep(&config.load()?, &teacher, axis, &values)? {
                println!("{},{}", row.value, row.test_accuracy);
            }
        }
        Command::Eval { config, checkpoint } => {
            println!("test_accuracy {}", cmd_eval(&config.load()?, &checkpoint)?);
        }
        Command::Bench { checkpoint, reps } => {
            let r = cmd_bench(&checkpoint, reps)?;
            println!("repetitions {}", r.repetitions);
            println!("mean_ms {:.6}", r.mean_ms);
            println!("median_ms {:.6}", r.median_ms);
            println!("std_ms {:.6}", r.std_ms);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}

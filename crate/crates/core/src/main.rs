use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use qdiff::cli::{self, PTQ_FILE, STUDENT_FILE, TEACHER_FILE};
use qdiff::config::RunConfig;
use qdiff::numerics::PrecisionFormat;
use qdiff::{Error, Result};

/// Quantized diffusion: train, distill to INT8, sample with per-step
/// precision, evaluate and benchmark.
#[derive(Parser, Debug)]
#[command(name = "qdiff", version)]
struct Args {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set qat.max_steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Denoising steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Steps at each end of the trajectory run in the high-precision format.
    #[arg(long, global = true)]
    boundary: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision teacher on the toy dataset.
    Train,
    /// Quantization-aware training of an INT8 student distilled from the teacher.
    Qat {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Calibrate an INT8 model without training (baseline for QAT).
    Ptq {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Generate images with the configured precision policy.
    Sample {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(short = 'n', long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        high: Option<PrecisionFormat>,
        #[arg(long)]
        low: Option<PrecisionFormat>,
    },
    /// Fréchet distance of the five-configuration matrix.
    Eval {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        /// Also compare against this calibration-only checkpoint.
        #[arg(long)]
        ptq: Option<PathBuf>,
    },
    /// Latency of the matrix on the benchmark network plus kernel micro-benchmarks.
    Bench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved configuration.
    Config,
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(t) = args.threads {
        overrides.push(format!("threads={t}"));
    }
    if let Some(n) = args.steps {
        overrides.push(format!("policy.steps={n}"));
    }
    if let Some(k) = args.boundary {
        overrides.push(format!("policy.boundary={k}"));
    }
    if let Command::Sample { high, low, .. } = &args.command {
        if let Some(f) = high {
            overrides.push(format!("policy.high=\"{f}\""));
        }
        if let Some(f) = low {
            overrides.push(format!("policy.low=\"{f}\""));
        }
    }
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(args: Args) -> Result<()> {
    let config = load_config(&args)?;
    let pool = cli::worker_pool(&config)?;
    let out = |name: &str| config.output_dir.join(name);
    let or = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out(name));
    match &args.command {
        Command::Train => print_json(&cli::cmd_train(&config)?),
        Command::Qat { teacher } => print_json(&cli::cmd_qat(&config, &pool, &or(teacher, TEACHER_FILE))?),
        Command::Ptq { teacher } => {
            let path = cli::cmd_ptq(&config, &or(teacher, TEACHER_FILE))?;
            print_json(&serde_json::json!({ "checkpoint": path }))
        }
        Command::Sample { teacher, student, count, seed, .. } => {
            let student = student.clone().or_else(|| {
                let p = out(STUDENT_FILE);
                p.exists().then_some(p)
            });
            let m = cli::cmd_sample(&config, &pool, &or(teacher, TEACHER_FILE), student.as_deref(), *count, *seed)?;
            print_json(&m)
        }
        Command::Eval { teacher, student, ptq } => {
            let ptq = ptq.clone().or_else(|| {
                let p = out(PTQ_FILE);
                p.exists().then_some(p)
            });
            let r =
                cli::cmd_eval(&config, &pool, &or(teacher, TEACHER_FILE), &or(student, STUDENT_FILE), ptq.as_deref())?;
            print_json(&r)
        }
        Command::Bench { seed } => print_json(&cli::cmd_bench(&config, &pool, *seed)?),
        Command::Config => {
            println!("{}", config.to_json()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = Error::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", cli::error_line(&err));
            return ExitCode::from(2);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

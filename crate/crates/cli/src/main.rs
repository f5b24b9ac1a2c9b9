use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpgrad::grad_sample::GradSamplerRegistry;
use dpgrad::optimizer::NoiseSchedule;
use dpgrad::validator::validate;
use dpgrad::DpError;
use dpgrad_cli::account::{account, trace_table, AccountConfig};
use dpgrad_cli::bench::{bench_table, microbench, BenchConfig};
use dpgrad_cli::config::{load_model_file, RunConfig, TrainMode};
use dpgrad_cli::memory::predict_memory;
use dpgrad_cli::report::{emit_report, fmt_f64, Format, Table};
use dpgrad_cli::train::run_train;
use dpgrad_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "dpgrad", version, about = "Differentially private SGD: training, benchmarks, accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a run config; flags override config fields.
    Train(TrainArgs),
    /// Time plain, vectorized and micro-batch gradient passes.
    Microbench(BenchArgs),
    /// Print the ε trace of a run.
    Account(AccountArgs),
    /// Check a model file for privacy-incompatible layers.
    Validate {
        model_file: PathBuf,
    },
    /// Evaluate the per-sample gradient memory model.
    PredictMem(MemArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    noise_multiplier: Option<f64>,
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    logical_batch: Option<usize>,
    #[arg(long)]
    physical_batch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    secure_mode: bool,
    /// Train without clipping or noise.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_noise: Option<u64>,
    /// Fallback for unset seeds.
    #[arg(long, env = "DPGRAD_SEED", hide_env_values = true)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BenchArgs {
    /// Layer kinds to benchmark.
    #[arg(long, value_delimiter = ',', default_value = "linear,embedding,conv2d,layer_norm,group_norm")]
    layers: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    batch_sizes: Vec<usize>,
    /// Timed passes per layer, batch size and mode.
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    /// Distinct input batches cycled through.
    #[arg(long, default_value_t = 10)]
    input_batches: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, env = "DPGRAD_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    noise_multiplier: f64,
    /// JSON noise schedule, e.g. '{"kind":"exponential","gamma":0.9}'.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    sample_rate: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// Report every n-th step.
    #[arg(long, default_value_t = 1)]
    every: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct MemArgs {
    #[arg(long)]
    batch_size: usize,
    /// Parameter count L.
    #[arg(long)]
    params: usize,
    /// Per-sample data size C (features, label and output).
    #[arg(long)]
    data_size: usize,
    #[command(flatten)]
    output: Output,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    macro_rules! set {
        ($($field:ident),*) => {$(if args.$field.is_some() { cfg.$field = args.$field; })*};
    }
    set!(noise_multiplier, target_epsilon, sample_rate, logical_batch, physical_batch, seed_data, seed_noise);
    if args.noise_multiplier.is_some() {
        cfg.target_epsilon = None;
    } else if args.target_epsilon.is_some() {
        cfg.noise_multiplier = None;
    }
    if args.sample_rate.is_some() {
        cfg.logical_batch = None;
    } else if args.logical_batch.is_some() {
        cfg.sample_rate = None;
    }
    if let Some(v) = args.max_grad_norm {
        cfg.max_grad_norm = v;
    }
    if let Some(v) = args.delta {
        cfg.delta = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    cfg.secure_mode |= args.secure_mode;
    if args.plain {
        cfg.mode = TrainMode::Plain;
    }
    let out = args.output.out.or(cfg.out.clone());
    let report = run_train(&cfg, args.seed)?;
    emit_report(&report.table()?, args.output.format, out.as_deref())?;
    eprintln!("{}", report.summary());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        layers: args.layers,
        batch_sizes: args.batch_sizes,
        repeats: args.repeats,
        input_batches: args.input_batches,
        warmup: args.warmup,
        seed: args.seed,
    };
    emit_report(&bench_table(&microbench(&cfg)?)?, args.output.format, args.output.out.as_deref())
}

fn account_cmd(args: AccountArgs) -> Result<()> {
    let schedule = match &args.schedule {
        Some(s) => serde_json::from_str::<NoiseSchedule>(s)?,
        None => NoiseSchedule::Constant,
    };
    let cfg = AccountConfig {
        noise_multiplier: args.noise_multiplier,
        schedule,
        sample_rate: args.sample_rate,
        steps: args.steps,
        delta: args.delta,
        every: args.every,
    };
    let trace = account(&cfg)?;
    emit_report(&trace_table(&trace, args.sample_rate)?, args.output.format, args.output.out.as_deref())
}

fn predict(args: MemArgs) -> Result<()> {
    let e = predict_memory(args.batch_size, args.params, args.data_size)?;
    let mut t = Table::new(["b", "L", "C", "m_non_dp", "m_dp", "ratio", "regime", "approx_ratio"]);
    t.push(vec![
        e.batch_size.to_string(),
        e.num_params.to_string(),
        e.data_size.to_string(),
        fmt_f64(e.m_non_dp),
        fmt_f64(e.m_dp),
        fmt_f64(e.ratio),
        e.regime.label().to_string(),
        fmt_f64(e.approx_ratio),
    ])?;
    emit_report(&t, args.output.format, args.output.out.as_deref())
}

/// Exit status 1 when violations are found.
fn validate_cmd(model_file: PathBuf) -> Result<bool> {
    let descriptors = load_model_file(&model_file)?;
    let violations = validate(&descriptors, &GradSamplerRegistry::<f32>::with_builtin_rules());
    for v in &violations {
        println!("{v}");
    }
    Ok(violations.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Microbench(a) => bench(a).map(|_| true),
        Command::Account(a) => account_cmd(a).map(|_| true),
        Command::PredictMem(a) => predict(a).map(|_| true),
        Command::Validate { model_file } => validate_cmd(model_file),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Dp(DpError::Validation(violations))) => {
            for v in &violations {
                println!("{v}");
            }
            eprintln!("error: model failed validation");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

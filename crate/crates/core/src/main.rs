use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, ValueEnum};
use nested_cate::commands::run;
use nested_cate::config::{Overrides, RunConfig, Subcommand};
use nested_cate::{ErrorCategory, PseudoVariant};

/// Target-population CATE curves from a trial nested in a cohort.
#[derive(Parser)]
#[command(name = "nested-cate", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Estimate CATE curves with pointwise intervals and uniform bands.
    Analyze(Flags),
    /// Draw a dataset from the configured process and write its true CATE.
    Simulate(Flags),
    /// Repeat simulate and analyze, reporting bias and coverage.
    Validate(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Aipw,
    Ipw,
    TrialOnly,
}

#[derive(Args)]
struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Multiplier-bootstrap replicates.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    grid_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    grid_max: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    /// Cross-fit the nuisance models.
    #[arg(long)]
    crossfit: bool,
    #[arg(long)]
    stratify_by: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            out: self.out.clone(),
            seed: self.seed,
            alpha: self.alpha,
            replicates: self.replicates,
            grid_min: self.grid_min,
            grid_max: self.grid_max,
            grid_step: self.grid_step,
            variant: self.variant.map(|v| match v {
                Variant::Aipw => PseudoVariant::Aipw,
                Variant::Ipw => PseudoVariant::Ipw,
                Variant::TrialOnly => PseudoVariant::TrialOnly,
            }),
            crossfit: self.crossfit.then_some(true),
            stratify_by: self.stratify_by.clone(),
        }
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Io => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, flags) = match &cli.command {
        Command::Analyze(f) => (Subcommand::Analyze, f),
        Command::Simulate(f) => (Subcommand::Simulate, f),
        Command::Validate(f) => (Subcommand::Validate, f),
    };
    let config = match &flags.config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::default()),
    };
    let result = config.and_then(|mut cfg| {
        cfg.apply(&flags.overrides());
        run(command, &cfg)
    });
    match result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("validation thresholds failed; see report.json");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let category = e.category();
            eprintln!("error ({category:?}): {e}");
            ExitCode::from(exit_code(category))
        }
    }
}

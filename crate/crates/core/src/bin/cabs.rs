use std::path::PathBuf;
use std::process::ExitCode;

use cabs::harness::{self, format_float, ExperimentConfig, OUTPUT_DIR_ENV};
use cabs::validation;
use cabs::Error;
use clap::{Parser, Subcommand};

/// Mini-batch SGD with coupled adaptive batch sizes.
#[derive(Debug, Parser)]
#[command(name = "cabs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its metrics CSV.
    Run {
        config: PathBuf,
        /// Config overrides, `--key=value`.
        #[arg(allow_hyphen_values = true, trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Train every learning rate (and theta) of a grid and pick the best.
    Grid {
        config: PathBuf,
        #[arg(allow_hyphen_values = true, trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Run the numerical validation suites.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write IDX files for tests and examples.
    EmitFixtures {
        /// Defaults to `$CABS_OUTPUT_DIR/fixtures`, else `fixtures`.
        dir: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(config: PathBuf, overrides: Vec<String>) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::load(&config, &overrides)?;
    let out = harness::run_experiment(&cfg)?;
    let path = cfg.output_path();
    harness::emit_csv(&out.records, &path)?;
    let s = &out.summary;
    println!(
        "steps={} examples_accessed={} final_train_loss={} final_test_accuracy={} best_test_accuracy={}",
        s.steps,
        s.examples_accessed,
        format_float(s.final_train_loss),
        format_float(s.final_test_accuracy),
        format_float(s.best_test_accuracy)
    );
    println!("wrote {}", path.display());
    Ok(match &s.failure {
        Some(reason) => {
            eprintln!("run failed: {reason}");
            ExitCode::from(1)
        }
        None => ExitCode::SUCCESS,
    })
}

fn grid(config: PathBuf, overrides: Vec<String>) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::load(&config, &overrides)?;
    let out = harness::grid_search(&cfg)?;
    for (i, p) in out.points.iter().enumerate() {
        let s = &p.outcome.summary;
        let theta = p.theta.map(|t| format!(" theta={}", format_float(t))).unwrap_or_default();
        let status = match &s.failure {
            Some(reason) => format!("failed ({reason})"),
            None => format!(
                "final_test_accuracy={} final_train_loss={}",
                format_float(s.final_test_accuracy),
                format_float(s.final_train_loss)
            ),
        };
        let mark = if i == out.best { "*" } else { " " };
        println!("{mark} lr={}{theta} {status}", format_float(p.learning_rate));
    }
    let summary = out.write(&cfg.output_dir, &cfg.name)?;
    println!("wrote {}", summary.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(seed: u64) -> Result<ExitCode, Error> {
    let reports = validation::run_all(seed)?;
    println!("{:<28} {:<6} {:>12} {:>12}", "check", "status", "metric", "threshold");
    for r in &reports {
        println!(
            "{:<28} {:<6} {:>12.3e} {:>12.3e}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.metric,
            r.threshold,
            r.detail
        );
    }
    for r in &reports {
        println!("{}", r.summary_line());
    }
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn emit_fixtures(dir: Option<PathBuf>) -> Result<ExitCode, Error> {
    let dir = dir.unwrap_or_else(|| {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(|d| PathBuf::from(d).join("fixtures"))
            .unwrap_or_else(|| PathBuf::from("fixtures"))
    });
    for path in harness::emit_fixtures(&dir)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => run(config, overrides),
        Command::Grid { config, overrides } => grid(config, overrides),
        Command::Validate { seed } => validate(seed),
        Command::EmitFixtures { dir } => emit_fixtures(dir),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

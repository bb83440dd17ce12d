use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tendency_core::config::{parse_override, run_experiment, ExperimentConfig, SeedOutcome};
use tendency_core::report::{render_markdown, summarize};
use tendency_core::verify::{verify, VerifyKind};
use tendency_core::Error;

/// Multi-agent value factorization experiments.
#[derive(Debug, Parser)]
#[command(name = "tendency", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, checkpoints and a config echo.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; replaces the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Dotted `key=value` override, applied in order (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run randomised gradient and identity checks; prints a JSON report.
    Verify {
        #[arg(long)]
        kind: VerifyKind,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise metrics CSVs into quartile tables.
    Report {
        #[arg(long)]
        glob: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failures the user can fix by changing inputs exit with 1.
#[derive(Debug)]
struct Rejected(String);

impl std::fmt::Display for Rejected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Rejected {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let rejected = err.chain().any(|e| {
        e.is::<Rejected>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Verification { .. }))
    });
    if rejected {
        1
    } else {
        2
    }
}

fn run(config: PathBuf, seeds: Option<Vec<u64>>, overrides: Vec<String>, quiet: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    let parsed = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    cfg = cfg.with_overrides(&parsed)?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    let points = run_experiment(&cfg, |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    for point in points {
        for seed in point.seeds {
            match seed {
                SeedOutcome::Completed(s) => println!(
                    "{} seed {}: score {:.3} return {:.3} after {} env steps ({})",
                    s.algo,
                    s.seed,
                    s.final_eval.score(),
                    s.final_eval.mean_return,
                    s.env_steps,
                    point.dir.display()
                ),
                SeedOutcome::Skipped { seed, metrics } => println!("seed {seed}: already complete ({})", metrics.display()),
            }
        }
    }
    Ok(())
}

fn verify_cmd(kind: VerifyKind, trials: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let report = verify(kind, trials, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    report.into_result()?;
    Ok(())
}

fn report_cmd(pattern: &str, out: PathBuf) -> Result<()> {
    let mut paths = Vec::new();
    for entry in glob::glob(pattern).map_err(|e| Rejected(format!("bad glob `{pattern}`: {e}")))? {
        paths.push(entry?);
    }
    if paths.is_empty() {
        return Err(Rejected(format!("no files match `{pattern}`")).into());
    }
    paths.sort();
    let md = render_markdown(&summarize(&paths)?);
    fs::write(&out, &md).with_context(|| format!("writing {}", out.display()))?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seeds,
            overrides,
            quiet,
        } => run(config, seeds, overrides, quiet),
        Command::Verify { kind, trials, seed, out } => verify_cmd(kind, trials, seed, out),
        Command::Report { glob, out } => report_cmd(&glob, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

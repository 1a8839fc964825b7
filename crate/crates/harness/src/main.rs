use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use tweak_core::transports::trace::trace_model_load;
use tweak_harness::matrix::{evaluate_stack, render_markdown};
use tweak_harness::report::{report_markdown, write_reports};
use tweak_harness::scenario::meets_expectation;
use tweak_harness::training::shared_classifier;
use tweak_harness::{load_config, run_scenario};

const EXIT_UNEXPECTED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

/// Evaluate composed circumvention transports against a simulated censor.
#[derive(Parser)]
#[command(name = "tweak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a scenario config.
    Validate { config: PathBuf },
    /// Run a scenario and write its reports.
    Run {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; defaults to `reports/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the coverage matrix from every `*.cfg` in a directory.
    Matrix {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a trace CSV (`length,iat_ms`).
    TraceStats { csv: PathBuf },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_CONFIG)
}

fn validate(path: &Path) -> ExitCode {
    match load_config(path) {
        Ok(cfg) => {
            let nodes: Vec<&str> = cfg.policy.policy.enabled.iter().map(|n| n.label()).collect();
            println!(
                "ok: scenario `{}`, stack `{}` ({}), nodes [{}], {} trial(s)",
                cfg.name,
                cfg.stack.name(),
                cfg.stack.descriptor().render_layers(),
                nodes.join(", "),
                cfg.trials
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.unwrap_or_else(|| Path::new("reports").join(&cfg.name));
    let result = run_scenario(&cfg);
    if let Err(e) = write_reports(&dir, &cfg, &result) {
        return fail(format!("{}: {e}", dir.display()));
    }
    print!("{}", report_markdown(&cfg, &result));
    let declared = cfg.expect.detected.is_some() || cfg.expect.node.is_some();
    if declared && !meets_expectation(&cfg, &result.report) {
        return ExitCode::from(EXIT_UNEXPECTED);
    }
    ExitCode::SUCCESS
}

fn matrix(dir: &Path, out: &Path) -> ExitCode {
    let mut paths: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
            .collect(),
        Err(e) => return fail(format!("{}: {e}", dir.display())),
    };
    paths.sort();
    if paths.is_empty() {
        return fail(format!("{}: no .cfg files", dir.display()));
    }
    let mut configs = Vec::new();
    for p in &paths {
        match load_config(p) {
            Ok(c) => configs.push(c),
            Err(e) => return fail(e),
        }
    }
    let rows: Vec<_> = configs
        .iter()
        .map(|cfg| {
            let clf = shared_classifier(10_000, &cfg.background, cfg.seed);
            eprintln!("evaluating {} ({} trials per suite)", cfg.stack.name(), cfg.trials);
            evaluate_stack(cfg, &clf)
        })
        .collect();
    if let Err(e) = fs::write(out, render_markdown(&rows)) {
        return fail(format!("{}: {e}", out.display()));
    }
    println!("wrote {}", out.display());
    ExitCode::SUCCESS
}

fn trace_stats(path: &Path) -> ExitCode {
    let model = match trace_model_load(path) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let lengths = model.length_histogram();
    let mean_len: f64 = lengths.iter().map(|(&l, &p)| l as f64 * p).sum();
    let iats = model.iat_histogram_ms();
    let mean_iat: f64 = iats.iter().map(|(v, p)| v * p).sum();
    let mut text = String::new();
    let _ = writeln!(text, "source: {}", model.source());
    let _ = writeln!(text, "rows: {}", model.rows());
    let _ = writeln!(text, "clamped lengths: {}", model.clamped());
    let _ = writeln!(text, "distinct lengths: {}", lengths.len());
    let _ = writeln!(text, "mean length: {mean_len:.1} bytes");
    let _ = writeln!(text, "mean inter-arrival: {mean_iat:.3} ms");
    text.push_str("\nlength,probability\n");
    for (l, p) in &lengths {
        let _ = writeln!(text, "{l},{p:.6}");
    }
    text.push_str("\niat_ms,probability\n");
    for (v, p) in &iats {
        let _ = writeln!(text, "{v},{p:.6}");
    }
    // A closed pipe (e.g. `| head`) is not an error.
    let _ = io::stdout().write_all(text.as_bytes());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            if e.kind() != ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Matrix { dir, out } => matrix(&dir, &out),
        Command::TraceStats { csv } => trace_stats(&csv),
    }
}

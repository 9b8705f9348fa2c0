use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use ipd_rewire::env::RewiringSchedule;
use ipd_rewire::experiment::{
    analyze, default_conditions, run_grid, run_single_entry, Bias, Condition, FrozenRewiring, Manifest, RunConfig,
    RunStatus,
};
use ipd_rewire::selfcheck::{self, SelfcheckOptions};
use ipd_rewire::SimError;

/// Exit code for runtime failures. Usage errors exit with 2 (clap's default).
const RUNTIME_FAILURE: u8 = 1;
const USAGE_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "ipd-rewire", version, about = "Iterated prisoner's dilemma with learned network rewiring")]
#[command(after_help = "Exit codes: 0 success, 1 runtime failure, 2 usage error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one pair of agents and write metrics, responses, checkpoint and config.
    Run(RunArgs),
    /// Run every condition for several seeds and write a manifest.
    Grid(GridArgs),
    /// Aggregate finished runs across seeds.
    Analyze(AnalyzeArgs),
    /// Run the built-in property suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run config. Mutually exclusive with the inline condition flags.
    #[arg(long, conflicts_with_all = ["schedule", "bias", "episodes", "seed", "no_rewiring_learning", "frozen_random_rewiring", "metrics_bin"])]
    config: Option<PathBuf>,
    /// Rewiring schedule.
    #[arg(long, value_parser = ["none", "half", "full"], required_unless_present = "config")]
    schedule: Option<String>,
    /// Fixed policy carried by agent 0.
    #[arg(long, value_parser = ["none", "allc", "tft", "ostracism"], required_unless_present = "config")]
    bias: Option<String>,
    /// Number of episodes.
    #[arg(long)]
    episodes: Option<u64>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes per metrics row.
    #[arg(long)]
    metrics_bin: Option<u64>,
    /// Replace learned rewiring with uniform random choices.
    #[arg(long)]
    no_rewiring_learning: bool,
    /// Replace learned rewiring with a randomly initialized network that never trains.
    #[arg(long)]
    frozen_random_rewiring: bool,
    /// Output directory.
    #[arg(long, env = "IPD_REWIRE_OUT", default_value = "results")]
    out: PathBuf,
    /// Suppress per-bin progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Seeds per condition (seeds 1..=N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Episodes per run.
    #[arg(long, default_value_t = 20_000)]
    episodes: u64,
    /// Episodes per metrics row.
    #[arg(long, default_value_t = 100)]
    metrics_bin: u64,
    /// Output directory.
    #[arg(long, env = "IPD_REWIRE_OUT", default_value = "results")]
    out: PathBuf,
    /// Runs executed concurrently (default: available cores).
    #[arg(long)]
    parallel: Option<usize>,
    /// Comma-separated `schedule:bias[:frozen|:frozennet]` list (default: all 12 cells).
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<Condition>>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Directory holding manifest.json.
    #[arg(long)]
    results: PathBuf,
    /// Where aggregate tables go (default: the results directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Seed for the randomized suites.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the gradient-check relative tolerance (harness testing).
    #[arg(long, hide = true, allow_negative_numbers = true)]
    gradient_tolerance: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Selfcheck(a) => Ok(cmd_selfcheck(a)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = if matches!(e, SimError::Config(_)) { USAGE_ERROR } else { RUNTIME_FAILURE };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

/// Print a parse error followed by the relevant usage line; help and version exit 0.
fn usage_error(e: clap::Error) -> ExitCode {
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = e.print();
        return ExitCode::SUCCESS;
    }
    let mut cmd = Cli::command();
    cmd.build();
    let sub = std::env::args().nth(1).unwrap_or_default();
    let usage = match cmd.find_subcommand_mut(&sub) {
        Some(sc) => sc.render_usage(),
        None => cmd.render_usage(),
    };
    let text = e.render().to_string();
    eprint!("{text}");
    if !text.contains("Usage:") {
        eprintln!("\n{usage}");
    }
    ExitCode::from(USAGE_ERROR)
}

fn run_config(a: &RunArgs) -> Result<RunConfig, SimError> {
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        return serde_json::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", path.display())));
    }
    let schedule: RewiringSchedule = a.schedule.as_deref().unwrap_or_default().parse().map_err(SimError::Config)?;
    let bias: Bias = a.bias.as_deref().unwrap_or_default().parse().map_err(SimError::Config)?;
    let mut c = RunConfig::new(schedule, bias, a.episodes.unwrap_or(20_000), a.seed.unwrap_or(1));
    if let Some(bin) = a.metrics_bin {
        c.metrics_bin = bin;
    }
    if a.frozen_random_rewiring {
        if schedule == RewiringSchedule::NoRewiring {
            return Err(SimError::Config("--frozen-random-rewiring needs a schedule with rewiring opportunities".into()));
        }
        c.rewiring_learning = false;
        c.frozen_rewiring = FrozenRewiring::RandomNetwork;
    } else if a.no_rewiring_learning {
        c.rewiring_learning = false;
    }
    Ok(c)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode, SimError> {
    let config = run_config(&a)?;
    config.validate()?;
    let quiet = a.quiet;
    let id = config.run_id();
    let bin = config.metrics_bin;
    let entry = run_single_entry(&config, &a.out, &mut |row| {
        if !quiet {
            eprintln!(
                "{id} bin {:>5} ep {:>7}  mutual_coop {:.3}  connected {:.3}  eps {:.3}",
                row.bin, row.bin * bin + row.episodes, row.mutual_coop_rate, row.connection_rate, row.epsilon
            );
        }
    })?;
    match entry.status {
        RunStatus::Ok => Ok(ExitCode::SUCCESS),
        RunStatus::Failed => {
            eprintln!("error: {}", entry.error.unwrap_or_default());
            Ok(ExitCode::from(RUNTIME_FAILURE))
        }
    }
}

fn cmd_grid(a: GridArgs) -> Result<ExitCode, SimError> {
    let conditions = a.conditions.unwrap_or_else(default_conditions);
    let mut base = RunConfig::new(RewiringSchedule::FullRewiring, Bias::NoBias, a.episodes, 0);
    base.metrics_bin = a.metrics_bin;
    let configs: Vec<RunConfig> =
        conditions.iter().flat_map(|c| (1..=a.seeds).map(move |s| (c, s))).map(|(c, s)| c.config(&base, s)).collect();
    for c in &configs {
        c.validate()?;
    }
    let parallel = a.parallel.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let total = configs.len();
    let done = AtomicUsize::new(0);
    let quiet = a.quiet;
    let manifest = run_grid(&configs, &a.out, parallel, &|entry| {
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        if !quiet {
            let status = match entry.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed => format!("FAILED: {}", entry.error.as_deref().unwrap_or("")),
            };
            eprintln!("[{n}/{total}] {} {status} ({:.1}s)", entry.run_id, entry.wall_time_s);
        }
    })?;
    let failed = manifest.runs.iter().filter(|r| r.status == RunStatus::Failed).count();
    if failed > 0 {
        eprintln!("{failed} of {total} runs failed; see {}", a.out.join("manifest.json").display());
        return Ok(ExitCode::from(RUNTIME_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitCode, SimError> {
    let out: &Path = a.out.as_deref().unwrap_or(&a.results);
    // Surface a missing manifest as a plain runtime error before any output is written.
    Manifest::read(&a.results)?;
    let report = analyze(&a.results, out)?;
    eprintln!("aggregated {} runs, excluded {}", report.runs_used, report.excluded.len());
    for x in &report.excluded {
        eprintln!("  excluded {}: {}", x.run_id, x.reason);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> ExitCode {
    let mut opts = SelfcheckOptions { seed: a.seed, ..SelfcheckOptions::default() };
    if let Some(tol) = a.gradient_tolerance {
        opts.gradient_tolerance = tol;
    }
    let reports = selfcheck::run_all(&opts);
    let mut ok = true;
    for r in &reports {
        let verdict = if r.ok() { "pass" } else { "FAIL" };
        println!("{:<14} {:>6}/{:<6} {verdict}  {}", r.name, r.passed, r.total, r.detail);
        for f in &r.failures {
            println!("    failed: {f}");
        }
        ok &= r.ok();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(RUNTIME_FAILURE)
    }
}

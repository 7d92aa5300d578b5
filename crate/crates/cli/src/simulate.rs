use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use relpos::sim::{
    parse_estimators, run_campaign, write_rmse_csv, write_timing_csv, Execution, Summary, TrialOptions, TrialResult,
};
use serde::Serialize;

use crate::{io_internal, load_config, CliError};

#[derive(clap::Args)]
pub struct Args {
    /// TOML file with noise keys at the top level and optional
    /// `[trajectory]` and `[estimator]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of proposed,vanilla,ekf,iekf.
    #[arg(long, default_value = "proposed,vanilla,ekf,iekf")]
    estimators: String,
    /// Worker threads; all cores by default.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Wall-clock budget in seconds; exceeding it adds a warning.
    #[arg(long)]
    budget: Option<f64>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Serialize)]
struct Report<'a> {
    #[serde(flatten)]
    summary: &'a Summary,
    elapsed_s: f64,
    budget_s: Option<f64>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct TraceFile<'a> {
    trial_id: u64,
    seed: u64,
    outcomes: &'a [relpos::sim::EstimatorOutcome],
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_internal(path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| CliError::Internal(e.to_string()))
}

fn write_trace(dir: &std::path::Path, trial: &TrialResult) -> Result<(), CliError> {
    let path = dir.join(format!("trial_{:04}.json", trial.trial_id));
    write_json(&path, &TraceFile { trial_id: trial.trial_id, seed: trial.seed, outcomes: &trial.outcomes })
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let config = load_config(args.config.as_ref())?;
    if args.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    if args.trials == 0 {
        return Err(CliError::Input("--trials must be at least 1".into()));
    }
    let estimators = parse_estimators(&args.estimators).map_err(|e| CliError::Input(e.to_string()))?;
    let execution = match args.jobs {
        None => Execution::Parallel,
        Some(0) => return Err(CliError::Input("--jobs must be at least 1".into())),
        Some(1) => Execution::Sequential,
        Some(n) => Execution::ParallelJobs(n),
    };

    let start = Instant::now();
    let options = TrialOptions { estimators, ..TrialOptions::default() };
    let campaign = run_campaign(&config, args.seed, args.trials, &options, execution)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let elapsed_s = start.elapsed().as_secs_f64();

    let traces = args.out.join("traces");
    fs::create_dir_all(&traces).map_err(io_internal(&traces))?;
    let rmse = args.out.join("rmse.csv");
    write_rmse_csv(&campaign, BufWriter::new(File::create(&rmse).map_err(io_internal(&rmse))?))
        .map_err(io_internal(&rmse))?;
    let timing = args.out.join("timing.csv");
    write_timing_csv(&campaign, BufWriter::new(File::create(&timing).map_err(io_internal(&timing))?))
        .map_err(io_internal(&timing))?;
    for trial in campaign.trials.iter().flatten() {
        write_trace(&traces, trial)?;
    }

    let summary = campaign.summary();
    let mut warnings: Vec<String> = summary.warning.iter().cloned().collect();
    for (id, trial) in campaign.trials.iter().enumerate() {
        if let Err(e) = trial {
            warnings.push(format!("trial {id} did not run: {e}"));
        }
    }
    if let Some(budget) = args.budget.filter(|&b| elapsed_s > b) {
        warnings.push(format!("campaign took {elapsed_s:.1} s, over the {budget} s budget"));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = Report { summary: &summary, elapsed_s, budget_s: args.budget, warnings };
    write_json(&args.out.join("summary.json"), &report)?;

    for s in &summary.estimators {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<9} mean {} m  median {} m  failures {}",
            s.estimator.name(),
            fmt(s.mean_rmse_m),
            fmt(s.median_rmse_m),
            s.failures
        );
    }
    for r in &summary.reductions {
        println!("reduction vs {:<8} {:+.1}%", r.baseline.name(), r.percent);
    }
    Ok(())
}

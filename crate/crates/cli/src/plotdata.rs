use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use relpos::sim::{quantile, EstimatorKind, EstimatorOutcome};
use serde::{Deserialize, Serialize};

use crate::{io_input, io_internal, CliError};

#[derive(clap::Args)]
pub struct Args {
    /// Directory written by `simulate`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trial whose error traces are exported.
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Estimator for `error_trace.csv`.
    #[arg(long, default_value = "proposed")]
    estimator: EstimatorKind,
    /// Log-spaced histogram bins per decade.
    #[arg(long, default_value_t = 10)]
    bins_per_decade: u32,
}

#[derive(Deserialize)]
struct RmseRow {
    estimator: EstimatorKind,
    rmse_m: Option<f64>,
}

#[derive(Deserialize)]
struct TimingRow {
    estimator: EstimatorKind,
    mean_solve_s: f64,
    solves: usize,
}

#[derive(Deserialize)]
struct TraceFile {
    outcomes: Vec<EstimatorOutcome>,
}

#[derive(Serialize)]
struct BoxRow {
    estimator: EstimatorKind,
    n: usize,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    mean: f64,
}

#[derive(Serialize)]
struct HistRow {
    estimator: EstimatorKind,
    bin_lower_s: f64,
    bin_upper_s: f64,
    count: usize,
}

#[derive(Serialize)]
struct TraceRow {
    t: f64,
    ex: f64,
    ey: f64,
    ez: f64,
    #[serde(rename = "3sigma_x")]
    sx: f64,
    #[serde(rename = "3sigma_y")]
    sy: f64,
    #[serde(rename = "3sigma_z")]
    sz: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(io_input(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    Ok(csv::Writer::from_writer(File::create(path).map_err(io_internal(path))?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

fn boxplot(rows: &[RmseRow], path: &Path) -> Result<(), CliError> {
    let mut groups: BTreeMap<EstimatorKind, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let values = groups.entry(r.estimator).or_default();
        if let Some(v) = r.rmse_m {
            values.push(v);
        }
    }
    let mut w = writer(path)?;
    for (estimator, mut v) in groups {
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let q = |p| quantile(&v, p).expect("non-empty");
        w.serialize(BoxRow {
            estimator,
            n: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_internal(path))
}

fn timing_histogram(rows: &[TimingRow], bins_per_decade: u32, path: &Path) -> Result<(), CliError> {
    let times: Vec<&TimingRow> = rows.iter().filter(|r| r.solves > 0 && r.mean_solve_s > 0.0).collect();
    let mut w = writer(path)?;
    if let (Some(lo), Some(hi)) = (
        times.iter().map(|r| r.mean_solve_s).reduce(f64::min),
        times.iter().map(|r| r.mean_solve_s).reduce(f64::max),
    ) {
        let per = f64::from(bins_per_decade.max(1));
        let first = (lo.log10() * per).floor() as i64;
        let last = (hi.log10() * per).floor() as i64;
        let mut estimators: Vec<EstimatorKind> = times.iter().map(|r| r.estimator).collect();
        estimators.sort();
        estimators.dedup();
        for estimator in estimators {
            let mut counts = vec![0usize; (last - first + 1) as usize];
            for r in times.iter().filter(|r| r.estimator == estimator) {
                let bin = ((r.mean_solve_s.log10() * per).floor() as i64).clamp(first, last);
                counts[(bin - first) as usize] += 1;
            }
            for (i, count) in counts.into_iter().enumerate() {
                let b = (first + i as i64) as f64;
                w.serialize(HistRow {
                    estimator,
                    bin_lower_s: 10f64.powf(b / per),
                    bin_upper_s: 10f64.powf((b + 1.0) / per),
                    count,
                })
                .map_err(csv_err(path))?;
            }
        }
    }
    w.flush().map_err(io_internal(path))
}

fn error_trace(outcome: &EstimatorOutcome, path: &Path) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let tr = &outcome.trace;
    for ((t, e), s) in tr.times.iter().zip(&tr.errors).zip(&tr.sigmas) {
        w.serialize(TraceRow { t: *t, ex: e[0], ey: e[1], ez: e[2], sx: 3.0 * s[0], sy: 3.0 * s[1], sz: 3.0 * s[2] })
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_internal(path))
}

fn error_norms(outcomes: &[EstimatorOutcome], path: &Path) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(outcomes.iter().map(|o| o.estimator.name().to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    let longest = outcomes.iter().max_by_key(|o| o.trace.times.len());
    for (k, t) in longest.map(|o| o.trace.times.as_slice()).unwrap_or_default().iter().enumerate() {
        let norms = outcomes.iter().map(|o| o.trace.errors.get(k).map(|e| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()));
        let record: Vec<Option<f64>> = std::iter::once(Some(*t)).chain(norms).collect();
        w.serialize(record).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_internal(path))
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let rmse: Vec<RmseRow> = read_csv(&args.run.join("rmse.csv"))?;
    let timing: Vec<TimingRow> = read_csv(&args.run.join("timing.csv"))?;
    let trace_path = args.run.join("traces").join(format!("trial_{:04}.json", args.trial));
    let text = std::fs::read_to_string(&trace_path).map_err(io_input(&trace_path))?;
    let trace: TraceFile =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", trace_path.display())))?;
    let selected = trace
        .outcomes
        .iter()
        .find(|o| o.estimator == args.estimator)
        .ok_or_else(|| CliError::Input(format!("{} has no {} trace", trace_path.display(), args.estimator)))?;

    std::fs::create_dir_all(&out).map_err(io_internal(&out))?;
    boxplot(&rmse, &out.join("boxplot.csv"))?;
    timing_histogram(&timing, args.bins_per_decade, &out.join("timing_hist.csv"))?;
    error_trace(selected, &out.join("error_trace.csv"))?;
    error_norms(&trace.outcomes, &out.join("error_norm.csv"))?;
    Ok(())
}

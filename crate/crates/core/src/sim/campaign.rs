use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{EstimatorKind, SimConfig};
use super::trial::{run_trial, TrialOptions, TrialResult};
use super::SimError;

/// Trials in which any estimator fails above this rate raise a warning.
pub const FAILURE_WARNING_RATE: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// One rayon task per trial, on `jobs` threads (all cores if `None`).
    /// Runs sequentially when built without the `parallel` feature.
    #[default]
    Parallel,
    ParallelJobs(usize),
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Indexed by trial id. `Err` holds the reason a trial could not run.
    pub trials: Vec<Result<TrialResult, String>>,
}

fn one(config: &SimConfig, seed: u64, id: u64, options: &TrialOptions) -> Result<TrialResult, String> {
    run_trial(config, seed, id, options).map_err(|e| e.to_string())
}

#[cfg(feature = "parallel")]
fn run_all(
    config: &SimConfig,
    seed: u64,
    trials: u64,
    options: &TrialOptions,
    execution: Execution,
) -> Result<Vec<Result<TrialResult, String>>, SimError> {
    use rayon::prelude::*;
    let par = || (0..trials).into_par_iter().map(|id| one(config, seed, id, options)).collect();
    match execution {
        Execution::Sequential => Ok((0..trials).map(|id| one(config, seed, id, options)).collect()),
        Execution::Parallel => Ok(par()),
        Execution::ParallelJobs(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| SimError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(par))
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all(
    config: &SimConfig,
    seed: u64,
    trials: u64,
    options: &TrialOptions,
    _execution: Execution,
) -> Result<Vec<Result<TrialResult, String>>, SimError> {
    Ok((0..trials).map(|id| one(config, seed, id, options)).collect())
}

/// Runs trials `0..trials`; the result does not depend on `execution`.
pub fn run_campaign(
    config: &SimConfig,
    seed: u64,
    trials: u64,
    options: &TrialOptions,
    execution: Execution,
) -> Result<Campaign, SimError> {
    if trials == 0 {
        return Err(SimError::Config("at least one trial is required".into()));
    }
    if options.estimators.is_empty() {
        return Err(SimError::Config("no estimators selected".into()));
    }
    config.validate()?;
    let trials = run_all(config, seed, trials, options, execution)?;
    Ok(Campaign { seed, estimators: options.estimators.clone(), trials })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub trials: usize,
    pub failures: usize,
    pub mean_rmse_m: Option<f64>,
    pub median_rmse_m: Option<f64>,
    pub q1_rmse_m: Option<f64>,
    pub q3_rmse_m: Option<f64>,
    pub min_rmse_m: Option<f64>,
    pub max_rmse_m: Option<f64>,
    pub mean_solve_s: Option<f64>,
    pub median_solve_s: Option<f64>,
}

/// `(baseline_mean - proposed_mean) / baseline_mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub baseline: EstimatorKind,
    pub reduction: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub trials: usize,
    pub failed_trials: usize,
    pub failure_rate: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub reductions: Vec<Reduction>,
    pub warning: Option<String>,
}

/// Linear interpolation between order statistics; `sorted` must be sorted.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    let last = sorted.len().checked_sub(1)?;
    let pos = q * last as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl Campaign {
    fn outcomes(&self, kind: EstimatorKind) -> impl Iterator<Item = Option<&super::trial::EstimatorOutcome>> {
        self.trials.iter().map(move |t| t.as_ref().ok().and_then(|r| r.outcome(kind)))
    }

    pub fn summary(&self) -> Summary {
        let estimators: Vec<EstimatorSummary> = self
            .estimators
            .iter()
            .map(|&kind| {
                let mut rmse: Vec<f64> = self.outcomes(kind).flatten().filter_map(|o| o.rmse_m).collect();
                let mut times: Vec<f64> =
                    self.outcomes(kind).flatten().filter(|o| o.solves > 0).map(|o| o.mean_solve_s).collect();
                let failures = self.outcomes(kind).filter(|o| o.is_none_or(|o| o.rmse_m.is_none())).count();
                rmse.sort_by(f64::total_cmp);
                times.sort_by(f64::total_cmp);
                EstimatorSummary {
                    estimator: kind,
                    trials: self.trials.len(),
                    failures,
                    mean_rmse_m: mean(&rmse),
                    median_rmse_m: quantile(&rmse, 0.5),
                    q1_rmse_m: quantile(&rmse, 0.25),
                    q3_rmse_m: quantile(&rmse, 0.75),
                    min_rmse_m: rmse.first().copied(),
                    max_rmse_m: rmse.last().copied(),
                    mean_solve_s: mean(&times),
                    median_solve_s: quantile(&times, 0.5),
                }
            })
            .collect();

        let proposed = estimators.iter().find(|s| s.estimator == EstimatorKind::Proposed).and_then(|s| s.mean_rmse_m);
        let reductions = match proposed {
            Some(p) => estimators
                .iter()
                .filter(|s| s.estimator != EstimatorKind::Proposed)
                .filter_map(|s| {
                    let b = s.mean_rmse_m?;
                    let reduction = (b - p) / b;
                    Some(Reduction { baseline: s.estimator, reduction, percent: 100.0 * reduction })
                })
                .collect(),
            None => Vec::new(),
        };

        let failed_trials = self.trials.iter().filter(|t| t.as_ref().map_or(true, |r| r.failed())).count();
        let failure_rate = failed_trials as f64 / self.trials.len() as f64;
        let warning = (failure_rate > FAILURE_WARNING_RATE).then(|| {
            format!(
                "{failed_trials} of {} trials had a failed estimator ({:.1}% > {:.0}%)",
                self.trials.len(),
                100.0 * failure_rate,
                100.0 * FAILURE_WARNING_RATE
            )
        });
        Summary { seed: self.seed, trials: self.trials.len(), failed_trials, failure_rate, estimators, reductions, warning }
    }
}

fn csv_error(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[derive(Serialize)]
struct RmseRow {
    trial_id: u64,
    estimator: &'static str,
    rmse_m: Option<f64>,
    converged: bool,
}

#[derive(Serialize)]
struct TimingRow {
    trial_id: u64,
    estimator: &'static str,
    mean_solve_s: f64,
    solves: usize,
}

/// One row per trial and estimator; depends only on configuration and seed.
pub fn write_rmse_csv<W: Write>(campaign: &Campaign, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, trial) in campaign.trials.iter().enumerate() {
        for &kind in &campaign.estimators {
            let outcome = trial.as_ref().ok().and_then(|r| r.outcome(kind));
            let rmse_m = outcome.and_then(|o| o.rmse_m);
            w.serialize(RmseRow { trial_id: id as u64, estimator: kind.name(), rmse_m, converged: rmse_m.is_some() })
                .map_err(csv_error)?;
        }
    }
    w.flush()
}

/// Wall-clock solve times; varies between runs.
pub fn write_timing_csv<W: Write>(campaign: &Campaign, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for trial in campaign.trials.iter().flatten() {
        for o in &trial.outcomes {
            w.serialize(TimingRow {
                trial_id: trial.trial_id,
                estimator: o.estimator.name(),
                mean_solve_s: o.mean_solve_s,
                solves: o.solves,
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&[7.0], 0.75), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    fn short_config() -> SimConfig {
        let mut c = SimConfig::default();
        c.trajectory.duration = 4.0;
        c
    }

    #[test]
    fn single_trial_summary_equals_the_trial() {
        let config = short_config();
        let options = TrialOptions::default();
        let campaign = run_campaign(&config, 3, 1, &options, Execution::Sequential).unwrap();
        let trial = run_trial(&config, 3, 0, &options).unwrap();
        let summary = campaign.summary();
        for s in &summary.estimators {
            let rmse = trial.outcome(s.estimator).unwrap().rmse_m;
            assert_eq!(s.mean_rmse_m, rmse);
            assert_eq!(s.median_rmse_m, rmse);
            assert_eq!(s.q1_rmse_m, rmse);
            assert_eq!(s.q3_rmse_m, rmse);
        }
    }

    #[test]
    fn execution_mode_does_not_change_results() {
        let config = short_config();
        let options = TrialOptions { estimators: vec![EstimatorKind::Proposed, EstimatorKind::Ekf], ..Default::default() };
        let a = run_campaign(&config, 9, 4, &options, Execution::Sequential).unwrap();
        let b = run_campaign(&config, 9, 4, &options, Execution::ParallelJobs(3)).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_rmse_csv(&a, &mut x).unwrap();
        write_rmse_csv(&b, &mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("trial_id,estimator,rmse_m,converged\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn zero_trials_is_rejected() {
        assert!(run_campaign(&SimConfig::default(), 0, 0, &TrialOptions::default(), Execution::Sequential).is_err());
    }
}

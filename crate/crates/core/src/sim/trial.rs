use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Vector6};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{EstimatorKind, NoiseConfig, SimConfig};
use super::message::AgentMessage;
use super::sensors::{synthesize_sensors, SensorStreams, REFERENCE_FIELD};
use super::trajectory::{sample_trajectories, TrajectorySpec, Truth};
use super::{stream_rng, SimError, Stream};
use crate::ahrs::{Ahrs, AhrsNoise, AhrsReference, AttitudeBelief, ResolvedAcceleration, GRAVITY_ENU};
use crate::baselines::{ekf_predict, ekf_update, iekf_update, FilterBelief};
use crate::dynamics::{preintegrate_agent, AgentContribution, PreintegratedFactor, RangeMeasurement, RelativeInput, RelativeState};
use crate::geometry::{so3_exp, Vec3};
use crate::swf::{KeypointPolicy, Prior, SlidingWindowFilter, SolverOptions, SwfConfig};

/// How per-agent contributions reach the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exchange {
    /// Agent 1's contribution is encoded, sent and decoded.
    #[default]
    Messages,
    /// Both contributions are used in memory.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOptions {
    pub estimators: Vec<EstimatorKind>,
    /// Draw noise-free sensors and a truth-initialized state while the
    /// estimators keep the configured noise model.
    pub noise_free: bool,
    pub exchange: Exchange,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self { estimators: EstimatorKind::ALL.to_vec(), noise_free: false, exchange: Exchange::Messages }
    }
}

/// Everything the estimators consume in one trial, plus the truth.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub trial_id: u64,
    pub seed: u64,
    pub truth: Truth,
    pub sensors: SensorStreams,
    pub resolved: [Vec<ResolvedAcceleration>; 2],
    /// Range epochs, one per range measurement.
    pub ranges: Vec<RangeMeasurement>,
    /// IMU sample index of each range epoch.
    pub epoch_samples: Vec<usize>,
    /// `factors[m - 1]` links epoch `m - 1` to `m`.
    pub factors: Vec<PreintegratedFactor>,
    pub initial_state: Vector6<f64>,
    pub initial_covariance: Matrix6<f64>,
    pub config: SimConfig,
}

impl TrialData {
    pub fn epochs(&self) -> usize {
        self.ranges.len()
    }

    pub fn true_state(&self, epoch: usize) -> Vector6<f64> {
        let n = self.epoch_samples[epoch];
        RelativeState::new(self.truth.relative_position(n), self.truth.relative_velocity(n)).to_vector()
    }

    pub fn prior(&self) -> Result<Prior, SimError> {
        Ok(Prior::new(self.initial_state, self.initial_covariance, 0)?)
    }

    /// Relative inputs for the IMU samples between two epochs.
    pub fn relative_inputs(&self, from_epoch: usize) -> Result<Vec<RelativeInput>, SimError> {
        let (lo, hi) = (self.epoch_samples[from_epoch], self.epoch_samples[from_epoch + 1]);
        (lo..hi)
            .map(|n| Ok(RelativeInput::from_agents(&self.resolved[0][n], &self.resolved[1][n])?))
            .collect()
    }
}

/// Translational error and 1σ bounds of one estimator at each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub times: Vec<f64>,
    pub errors: Vec<[f64; 3]>,
    pub sigmas: Vec<[f64; 3]>,
}

impl ErrorTrace {
    fn push(&mut self, t: f64, estimate: &Vector6<f64>, truth: &Vector6<f64>, cov: &Matrix6<f64>) {
        self.times.push(t);
        self.errors.push(std::array::from_fn(|i| estimate[i] - truth[i]));
        self.sigmas.push(std::array::from_fn(|i| cov[(i, i)].max(0.0).sqrt()));
    }

    pub fn rmse(&self) -> Option<f64> {
        if self.errors.is_empty() {
            return None;
        }
        let sum: f64 = self.errors.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>()).sum();
        Some((sum / self.errors.len() as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: EstimatorKind,
    /// `None` when the estimator diverged.
    pub rmse_m: Option<f64>,
    pub mean_solve_s: f64,
    pub solves: usize,
    /// Window solves that hit the iteration cap (IEKF: updates).
    pub nonconverged_solves: usize,
    pub failure: Option<String>,
    pub trace: ErrorTrace,
}

impl EstimatorOutcome {
    pub fn converged(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: u64,
    pub seed: u64,
    pub outcomes: Vec<EstimatorOutcome>,
}

impl TrialResult {
    pub fn outcome(&self, kind: EstimatorKind) -> Option<&EstimatorOutcome> {
        self.outcomes.iter().find(|o| o.estimator == kind)
    }

    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| !o.converged())
    }
}

fn normal3<R: rand::Rng>(rng: &mut R, std: f64) -> Vec3 {
    Vec3::from_fn(|_, _| {
        let n: f64 = StandardNormal.sample(rng);
        std * n
    })
}

fn contribution(samples: &[ResolvedAcceleration], end: f64) -> Result<AgentContribution, SimError> {
    Ok(preintegrate_agent(samples, end)?)
}

/// Draws the sensors, runs both attitude filters and builds the per-epoch
/// factors for a given ground truth.
pub fn prepare_trial(
    truth: Truth,
    config: &SimConfig,
    seed: u64,
    trial_id: u64,
    options: &TrialOptions,
) -> Result<TrialData, SimError> {
    config.validate()?;
    let noise = config.noise;
    let realized = if options.noise_free {
        NoiseConfig { magnetometer_std: 0.0, gyro_std: 0.0, accel_std: 0.0, distance_std: 0.0, ..noise }
    } else {
        noise
    };
    let mut sensors = synthesize_sensors(&truth, &realized, seed, trial_id);
    for z in &mut sensors.ranges {
        z.variance = noise.distance_std.powi(2);
    }
    let mut rng = stream_rng(seed, trial_id, Stream::Initial);
    let scale = if options.noise_free { 0.0 } else { 1.0 };

    let reference = AhrsReference::new(GRAVITY_ENU, REFERENCE_FIELD)?;
    let mut ahrs_noise = AhrsNoise::from_sample_stds(noise.gyro_std, noise.accel_std, noise.magnetometer_std, noise.imu_rate_hz);
    ahrs_noise.accel_dynamic_std = config.estimator.ahrs_accel_dynamic_std;
    ahrs_noise.static_gate = config.estimator.ahrs_static_gate;
    // Without noise the attitude filters start at the truth and are told so:
    // the gravity reference is corrupted by translational acceleration,
    // which would otherwise be the only disturbance left.
    ahrs_noise.gyro_psd *= scale;
    let mut resolved: [Vec<ResolvedAcceleration>; 2] = [Vec::new(), Vec::new()];
    for (a, out) in resolved.iter_mut().enumerate() {
        let err = normal3(&mut rng, noise.initial_attitude_std * scale);
        let initial = AttitudeBelief::new(
            truth.agents[a].attitude[0] * so3_exp(&err),
            Matrix3::identity() * (noise.initial_attitude_std * scale).powi(2),
        );
        let mut filter = Ahrs::new(initial, reference, ahrs_noise);
        *out = sensors.imu[a].iter().map(|s| filter.process(s)).collect::<Result<_, _>>()?;
    }

    let stride = noise.imu_per_range()?;
    let ranges = sensors.ranges.clone();
    let epoch_samples: Vec<usize> = (0..ranges.len()).map(|m| m * stride).collect();
    let mut factors = Vec::with_capacity(ranges.len().saturating_sub(1));
    for m in 1..ranges.len() {
        let (lo, hi) = (epoch_samples[m - 1], epoch_samples[m]);
        let end = truth.times[hi];
        let c1 = contribution(&resolved[0][lo..hi], end)?;
        let c2 = contribution(&resolved[1][lo..hi], end)?;
        let c1 = match options.exchange {
            Exchange::Raw => c1,
            Exchange::Messages => {
                let wire = AgentMessage::new((m - 1) as u64, m as u64, &c1, &resolved[0][hi - 1]).encode();
                AgentMessage::decode(&wire)?.to_contribution(&c2.transition)
            }
        };
        factors.push(PreintegratedFactor::from_contributions(m - 1, m, &c1, &c2)?);
    }

    let mut initial_covariance = Matrix6::zeros();
    for i in 0..3 {
        initial_covariance[(i, i)] = noise.initial_position_std.powi(2);
        initial_covariance[(i + 3, i + 3)] = noise.initial_velocity_std.powi(2);
    }
    let truth0 = RelativeState::new(truth.relative_position(0), truth.relative_velocity(0));
    let initial_state = RelativeState::new(
        truth0.position + normal3(&mut rng, noise.initial_position_std * scale),
        truth0.velocity + normal3(&mut rng, noise.initial_velocity_std * scale),
    )
    .to_vector();

    Ok(TrialData {
        trial_id,
        seed,
        truth,
        sensors,
        resolved,
        ranges,
        epoch_samples,
        factors,
        initial_state,
        initial_covariance,
        config: *config,
    })
}

fn swf_config(config: &SimConfig, kind: EstimatorKind) -> SwfConfig {
    SwfConfig {
        window_size: config.noise.window_size,
        policy: match kind {
            EstimatorKind::Vanilla => KeypointPolicy::MostRecent,
            _ => KeypointPolicy::Greedy { gamma: config.noise.gamma },
        },
        horizon: config.estimator.history_horizon,
        solver: SolverOptions {
            max_iters: config.estimator.solver_max_iters,
            tol: config.estimator.solver_tol,
            ..SolverOptions::default()
        },
    }
}

struct Run {
    trace: ErrorTrace,
    elapsed: f64,
    solves: usize,
    nonconverged: usize,
}

impl Run {
    fn new() -> Self {
        Self { trace: ErrorTrace::default(), elapsed: 0.0, solves: 0, nonconverged: 0 }
    }

    fn finish(self, kind: EstimatorKind, failure: Option<String>) -> EstimatorOutcome {
        EstimatorOutcome {
            estimator: kind,
            rmse_m: if failure.is_none() { self.trace.rmse() } else { None },
            mean_solve_s: if self.solves > 0 { self.elapsed / self.solves as f64 } else { 0.0 },
            solves: self.solves,
            nonconverged_solves: self.nonconverged,
            failure,
            trace: self.trace,
        }
    }
}

fn finite(x: &Vector6<f64>, p: &Matrix6<f64>) -> bool {
    x.iter().chain(p.iter()).all(|v| v.is_finite())
}

fn run_window(data: &TrialData, kind: EstimatorKind, run: &mut Run) -> Result<(), String> {
    let mut filter = SlidingWindowFilter::new(swf_config(&data.config, kind), data.prior().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let every = data.config.noise.ranges_per_solve().map_err(|e| e.to_string())?;
    for m in 0..data.epochs() {
        let start = Instant::now();
        let factor = m.checked_sub(1).map(|i| data.factors[i]);
        filter.push(factor, data.ranges[m]).map_err(|e| e.to_string())?;
        if m % every != 0 {
            continue;
        }
        let estimate = filter.solve().map_err(|e| format!("epoch {m}: {e}"))?;
        run.elapsed += start.elapsed().as_secs_f64();
        run.solves += 1;
        run.nonconverged += usize::from(!estimate.converged);
        let x = estimate.state.to_vector();
        if !finite(&x, &estimate.covariance) {
            return Err(format!("epoch {m}: non-finite estimate"));
        }
        run.trace.push(data.ranges[m].timestamp, &x, &data.true_state(m), &estimate.covariance);
    }
    Ok(())
}

fn run_filter(data: &TrialData, kind: EstimatorKind, run: &mut Run) -> Result<(), String> {
    let tuning = &data.config.estimator;
    let mut belief = FilterBelief::new(RelativeState::from_vector(&data.initial_state), data.initial_covariance);
    let every = data.config.noise.ranges_per_solve().map_err(|e| e.to_string())?;
    for m in 0..data.epochs() {
        let start = Instant::now();
        if m > 0 {
            let (lo, hi) = (data.epoch_samples[m - 1], data.epoch_samples[m]);
            for n in lo..hi {
                let u = RelativeInput::from_agents(&data.resolved[0][n], &data.resolved[1][n]).map_err(|e| e.to_string())?;
                let dt = data.truth.times[n + 1] - data.truth.times[n];
                belief = ekf_predict(&belief, &u, dt).map_err(|e| e.to_string())?;
            }
        }
        let z = &data.ranges[m];
        belief = match kind {
            EstimatorKind::Iekf => {
                let out = iekf_update(&belief, z, tuning.iekf_max_iters, tuning.iekf_tol).map_err(|e| format!("epoch {m}: {e}"))?;
                run.nonconverged += usize::from(!out.converged);
                out.belief
            }
            _ => ekf_update(&belief, z).map_err(|e| format!("epoch {m}: {e}"))?,
        };
        run.elapsed += start.elapsed().as_secs_f64();
        if m % every != 0 {
            continue;
        }
        run.solves += 1;
        let x = belief.mean.to_vector();
        if !finite(&x, &belief.covariance) {
            return Err(format!("epoch {m}: non-finite estimate"));
        }
        run.trace.push(z.timestamp, &x, &data.true_state(m), &belief.covariance);
    }
    Ok(())
}

/// Runs the selected estimators over a prepared trial.
pub fn run_estimators(data: &TrialData, estimators: &[EstimatorKind]) -> TrialResult {
    let outcomes = estimators
        .iter()
        .map(|&kind| {
            let mut run = Run::new();
            let result = match kind {
                EstimatorKind::Proposed | EstimatorKind::Vanilla => run_window(data, kind, &mut run),
                EstimatorKind::Ekf | EstimatorKind::Iekf => run_filter(data, kind, &mut run),
            };
            run.finish(kind, result.err())
        })
        .collect();
    TrialResult { trial_id: data.trial_id, seed: data.seed, outcomes }
}

/// Draws a trajectory for `(seed, trial_id)` and runs the trial on it.
pub fn run_trial(config: &SimConfig, seed: u64, trial_id: u64, options: &TrialOptions) -> Result<TrialResult, SimError> {
    let (_, truth) = sample_trajectories(&config.trajectory, config.noise.imu_rate_hz, seed, trial_id)?;
    let data = prepare_trial(truth, config, seed, trial_id, options)?;
    Ok(run_estimators(&data, &options.estimators))
}

/// Like [`run_trial`] on a caller-supplied trajectory.
pub fn run_trial_with_spec(
    spec: &TrajectorySpec,
    config: &SimConfig,
    seed: u64,
    trial_id: u64,
    options: &TrialOptions,
) -> Result<TrialResult, SimError> {
    let truth = super::trajectory::generate_trajectories(spec, config.noise.imu_rate_hz)?;
    let data = prepare_trial(truth, config, seed, trial_id, options)?;
    Ok(run_estimators(&data, &options.estimators))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(duration: f64) -> SimConfig {
        let mut c = SimConfig::default();
        c.trajectory.duration = duration;
        c
    }

    #[test]
    fn noise_free_truth_initialized_trial_is_accurate() {
        let config = short(10.0);
        let options = TrialOptions { noise_free: true, ..Default::default() };
        let result = run_trial(&config, 5, 0, &options).unwrap();
        for o in &result.outcomes {
            let rmse = o.rmse_m.unwrap();
            assert!(rmse < 1e-3, "{:?}: {rmse}", o.estimator);
        }
    }

    #[test]
    fn identical_seeds_give_identical_results() {
        let config = short(3.0);
        let a = run_trial(&config, 8, 2, &TrialOptions::default()).unwrap();
        let b = run_trial(&config, 8, 2, &TrialOptions::default()).unwrap();
        let strip = |r: &TrialResult| r.outcomes.iter().map(|o| (o.rmse_m, o.trace.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn messages_and_raw_inputs_agree_bitwise() {
        let config = short(3.0);
        let (_, truth) = sample_trajectories(&config.trajectory, 100.0, 4, 1).unwrap();
        let raw = prepare_trial(truth.clone(), &config, 4, 1, &TrialOptions { exchange: Exchange::Raw, ..Default::default() })
            .unwrap();
        let msg = prepare_trial(truth, &config, 4, 1, &TrialOptions::default()).unwrap();
        assert_eq!(raw.factors, msg.factors);
    }

    #[test]
    fn every_epoch_is_reported() {
        let config = short(2.0);
        let result = run_trial(&config, 1, 0, &TrialOptions::default()).unwrap();
        for o in &result.outcomes {
            assert_eq!(o.solves, 21);
            assert_eq!(o.trace.times.len(), 21);
            assert!(o.converged());
        }
    }
}

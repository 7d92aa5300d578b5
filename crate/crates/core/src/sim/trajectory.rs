use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrajectoryParams;
use super::{stream_rng, SimError, Stream};
use crate::geometry::{so3_exp, Rotation, Vec3};

/// Regeneration attempts before a trajectory draw is rejected.
pub const MAX_ATTEMPTS: usize = 10;

/// Smallest allowed ratio of the relative motion's singular values.
pub const PLANARITY_RATIO: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn omega(&self) -> f64 {
        TAU * self.frequency_hz
    }

    fn value(&self, t: f64) -> f64 {
        self.amplitude * (self.omega() * t + self.phase).sin()
    }

    fn rate(&self, t: f64) -> f64 {
        self.amplitude * self.omega() * (self.omega() * t + self.phase).cos()
    }

    fn accel(&self, t: f64) -> f64 {
        -self.amplitude * self.omega().powi(2) * (self.omega() * t + self.phase).sin()
    }
}

/// `C(t) = C_0 exp(θ(t) n^×) exp(w(t) m^×)` with `θ = rate·t` and a
/// sinusoidal wobble `w` about a second fixed axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttitudeMotion {
    pub initial: [f64; 3],
    pub spin_axis: [f64; 3],
    pub spin_rate: f64,
    pub wobble_axis: [f64; 3],
    pub wobble: Sinusoid,
}

impl AttitudeMotion {
    fn attitude(&self, t: f64) -> Rotation {
        let spin = Vec3::from(self.spin_axis) * (self.spin_rate * t);
        let wobble = Vec3::from(self.wobble_axis) * self.wobble.value(t);
        so3_exp(&Vec3::from(self.initial)) * so3_exp(&spin) * so3_exp(&wobble)
    }

    /// Body-frame angular velocity, `Ċ = C ω^×`.
    fn angular_velocity(&self, t: f64) -> Vec3 {
        let m = Vec3::from(self.wobble_axis);
        let wobble = so3_exp(&(m * self.wobble.value(t)));
        wobble.inverse_rotate(&(Vec3::from(self.spin_axis) * self.spin_rate)) + m * self.wobble.rate(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMotion {
    pub center: [f64; 3],
    /// Sinusoids per axis (x, y, z).
    pub axes: [Vec<Sinusoid>; 3],
    pub attitude: AttitudeMotion,
}

impl AgentMotion {
    fn position(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.center[i] + self.axes[i].iter().map(|s| s.value(t)).sum::<f64>())
    }

    fn velocity(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.axes[i].iter().map(|s| s.rate(t)).sum::<f64>())
    }

    fn acceleration(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.axes[i].iter().map(|s| s.accel(t)).sum::<f64>())
    }

    fn static_at(center: Vec3) -> Self {
        let zero = Sinusoid { amplitude: 0.0, frequency_hz: 1.0, phase: 0.0 };
        Self {
            center: center.into(),
            axes: [vec![zero], vec![zero], vec![zero]],
            attitude: AttitudeMotion {
                initial: [0.0; 3],
                spin_axis: [0.0, 0.0, 1.0],
                spin_rate: 0.0,
                wobble_axis: [1.0, 0.0, 0.0],
                wobble: zero,
            },
        }
    }
}

/// Fully determined two-agent motion over `[0, duration]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub seed: u64,
    pub agents: [AgentMotion; 2],
    pub workspace_bound: f64,
    pub min_separation: f64,
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl TrajectorySpec {
    /// Draws one trajectory from `params`; `attempt` selects an independent
    /// stream so rejected draws can be redrawn reproducibly.
    pub fn sample(params: &TrajectoryParams, seed: u64, trial: u64, attempt: usize) -> Self {
        let mut rng = stream_rng(seed, trial, Stream::Trajectory(attempt));
        let agent = |rng: &mut rand_chacha::ChaCha8Rng, center: Vec3| {
            let axes = std::array::from_fn(|_| {
                (0..params.sinusoids_per_axis)
                    .map(|_| Sinusoid {
                        amplitude: uniform(rng, params.amplitude_min, params.amplitude_max),
                        frequency_hz: uniform(rng, params.frequency_min, params.frequency_max),
                        phase: rng.random_range(0.0..TAU),
                    })
                    .collect()
            });
            // Uniform random initial attitude: random axis, angle with
            // density ∝ (1 - cos θ), drawn by rejection.
            let angle = loop {
                let a = rng.random_range(0.0..PI);
                if rng.random_range(0.0..1.0) <= (1.0 - a.cos()) / 2.0 {
                    break a;
                }
            };
            let attitude = AttitudeMotion {
                initial: (unit_vector(rng) * angle).into(),
                spin_axis: unit_vector(rng).into(),
                spin_rate: uniform(rng, 0.0, params.max_rotation_rate),
                wobble_axis: unit_vector(rng).into(),
                wobble: Sinusoid {
                    amplitude: params.wobble_amplitude,
                    frequency_hz: uniform(rng, params.frequency_min, params.frequency_max),
                    phase: rng.random_range(0.0..TAU),
                },
            };
            AgentMotion { center: center.into(), axes, attitude }
        };
        let baseline = unit_vector(&mut rng) * uniform(&mut rng, params.baseline_min, params.baseline_max);
        let a1 = agent(&mut rng, baseline);
        let a2 = agent(&mut rng, Vec3::zeros());
        Self {
            duration: params.duration,
            seed,
            agents: [a1, a2],
            workspace_bound: params.workspace_bound,
            min_separation: params.min_separation,
        }
    }

    /// Both agents at rest at the given positions.
    pub fn stationary(duration: f64, p1: Vec3, p2: Vec3) -> Self {
        Self {
            duration,
            seed: 0,
            agents: [AgentMotion::static_at(p1), AgentMotion::static_at(p2)],
            workspace_bound: f64::INFINITY,
            min_separation: 0.0,
        }
    }
}

/// Ground truth of one agent on the IMU time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTruth {
    pub position: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
    pub acceleration: Vec<Vec3>,
    pub attitude: Vec<Rotation>,
    pub angular_velocity: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    /// `t_n = n / imu_rate` for `n = 0..=N`.
    pub times: Vec<f64>,
    pub agents: [AgentTruth; 2],
}

impl Truth {
    /// Position of agent 1 relative to agent 2 at sample `n`.
    pub fn relative_position(&self, n: usize) -> Vec3 {
        self.agents[0].position[n] - self.agents[1].position[n]
    }

    pub fn relative_velocity(&self, n: usize) -> Vec3 {
        self.agents[0].velocity[n] - self.agents[1].velocity[n]
    }

    pub fn samples(&self) -> usize {
        self.times.len()
    }
}

fn evaluate(motion: &AgentMotion, times: &[f64]) -> AgentTruth {
    AgentTruth {
        position: times.iter().map(|&t| motion.position(t)).collect(),
        velocity: times.iter().map(|&t| motion.velocity(t)).collect(),
        acceleration: times.iter().map(|&t| motion.acceleration(t)).collect(),
        attitude: times.iter().map(|&t| motion.attitude.attitude(t)).collect(),
        angular_velocity: times.iter().map(|&t| motion.attitude.angular_velocity(t)).collect(),
    }
}

/// Singular values of the centred relative-position samples, descending.
pub fn relative_spread(positions: &[Vec3]) -> [f64; 3] {
    let n = positions.len().max(1) as f64;
    let mean = positions.iter().sum::<Vec3>() / n;
    let m = DMatrix::from_fn(positions.len(), 3, |r, c| positions[r][c] - mean[c]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.resize(3, 0.0);
    sv.sort_by(|a, b| b.total_cmp(a));
    [sv[0], sv[1], sv[2]]
}

/// Evaluates `spec` on the IMU grid without any acceptance checks.
pub fn evaluate_unchecked(spec: &TrajectorySpec, imu_rate_hz: f64) -> Truth {
    let steps = ((spec.duration * imu_rate_hz).round() as usize).max(1);
    let times: Vec<f64> = (0..=steps).map(|n| n as f64 / imu_rate_hz).collect();
    let agents = [evaluate(&spec.agents[0], &times), evaluate(&spec.agents[1], &times)];
    Truth { times, agents }
}

/// Evaluates `spec` on the IMU grid and checks it against the planarity,
/// separation and workspace constraints.
pub fn generate_trajectories(spec: &TrajectorySpec, imu_rate_hz: f64) -> Result<Truth, SimError> {
    if !(spec.duration * imu_rate_hz >= 1.0) {
        return Err(SimError::Config("trajectory shorter than one IMU period".into()));
    }
    let truth = evaluate_unchecked(spec, imu_rate_hz);

    let relative: Vec<Vec3> = (0..truth.samples()).map(|n| truth.relative_position(n)).collect();
    let sv = relative_spread(&relative);
    if !(sv[2] > PLANARITY_RATIO * sv[0]) {
        return Err(SimError::Planar { ratio: if sv[0] > 0.0 { sv[2] / sv[0] } else { 0.0 } });
    }
    let closest = relative.iter().map(|r| r.norm()).fold(f64::INFINITY, f64::min);
    if closest < spec.min_separation {
        return Err(SimError::Collision { distance: closest });
    }
    let extent = truth.agents.iter().flat_map(|a| a.position.iter()).map(|p| p.amax()).fold(0.0, f64::max);
    if extent > spec.workspace_bound {
        return Err(SimError::OutOfWorkspace { extent });
    }
    Ok(truth)
}

/// Draws trajectories until one passes the checks, up to [`MAX_ATTEMPTS`].
pub fn sample_trajectories(
    params: &TrajectoryParams,
    imu_rate_hz: f64,
    seed: u64,
    trial: u64,
) -> Result<(TrajectorySpec, Truth), SimError> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let spec = TrajectorySpec::sample(params, seed, trial, attempt);
        match generate_trajectories(&spec, imu_rate_hz) {
            Ok(truth) => return Ok((spec, truth)),
            Err(e) => last = Some(e),
        }
    }
    Err(SimError::Rejected { attempts: MAX_ATTEMPTS, last: Box::new(last.expect("at least one attempt")) })
}

/// Attitude rates recovered from consecutive attitudes, `log(C_n^T C_{n+1}) / dt`.
pub(crate) fn interval_rate(c0: &Rotation, c1: &Rotation, dt: f64) -> Vec3 {
    (c0.transpose() * *c1).log() / dt
}

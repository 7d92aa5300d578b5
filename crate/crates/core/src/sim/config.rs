use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::baselines::{IEKF_MAX_ITERS, IEKF_TOL};
use crate::keypoints::DEFAULT_HISTORY_HORIZON;

/// Sensor noise levels, rates and filter sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// μT, with a 50 μT reference field.
    pub magnetometer_std: f64,
    /// rad/s
    pub gyro_std: f64,
    /// m/s²
    pub accel_std: f64,
    /// m
    pub distance_std: f64,
    /// m
    pub initial_position_std: f64,
    /// m/s
    pub initial_velocity_std: f64,
    /// rad
    pub initial_attitude_std: f64,
    pub imu_rate_hz: f64,
    pub range_rate_hz: f64,
    pub rpe_rate_hz: f64,
    pub window_size: usize,
    pub gamma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            magnetometer_std: 1.0,
            gyro_std: 0.001,
            accel_std: 0.01,
            distance_std: 0.1,
            initial_position_std: 0.8,
            initial_velocity_std: 0.1,
            initial_attitude_std: 0.001,
            imu_rate_hz: 100.0,
            range_rate_hz: 10.0,
            rpe_rate_hz: 10.0,
            window_size: 20,
            gamma: 100.0,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    ((r - n).abs() < 1e-9 && n >= 1.0).then_some(n as usize)
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let stds = [
            ("magnetometer_std", self.magnetometer_std),
            ("gyro_std", self.gyro_std),
            ("accel_std", self.accel_std),
            ("distance_std", self.distance_std),
            ("initial_position_std", self.initial_position_std),
            ("initial_velocity_std", self.initial_velocity_std),
            ("initial_attitude_std", self.initial_attitude_std),
        ];
        for (name, v) in stds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("imu_rate_hz", self.imu_rate_hz), ("range_rate_hz", self.range_rate_hz), ("rpe_rate_hz", self.rpe_rate_hz)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.imu_per_range()?;
        self.ranges_per_solve()?;
        if self.window_size < 4 {
            return Err(SimError::Config(format!("window_size must be at least 4, got {}", self.window_size)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(SimError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// IMU samples per range epoch.
    pub fn imu_per_range(&self) -> Result<usize, SimError> {
        integer_ratio(self.imu_rate_hz, self.range_rate_hz)
            .ok_or_else(|| SimError::Config("imu_rate_hz must be an integer multiple of range_rate_hz".into()))
    }

    /// Range epochs per estimator solve.
    pub fn ranges_per_solve(&self) -> Result<usize, SimError> {
        integer_ratio(self.range_rate_hz, self.rpe_rate_hz)
            .ok_or_else(|| SimError::Config("range_rate_hz must be an integer multiple of rpe_rate_hz".into()))
    }
}

/// Distribution the random trajectories are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryParams {
    /// s
    pub duration: f64,
    pub sinusoids_per_axis: usize,
    /// m
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Hz
    pub frequency_min: f64,
    pub frequency_max: f64,
    /// Distance of agent 1's motion centre from agent 2's, m.
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Upper bound of the constant spin rate, rad/s.
    pub max_rotation_rate: f64,
    /// rad
    pub wobble_amplitude: f64,
    /// Trajectories closer than this to a collision are redrawn, m.
    pub min_separation: f64,
    /// Per-axis bound on each agent's position, m.
    pub workspace_bound: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            duration: 60.0,
            sinusoids_per_axis: 3,
            amplitude_min: 0.5,
            amplitude_max: 2.0,
            frequency_min: 0.05,
            frequency_max: 0.5,
            baseline_min: 2.0,
            baseline_max: 6.0,
            max_rotation_rate: 0.5,
            wobble_amplitude: 0.1,
            min_separation: 0.5,
            workspace_bound: 20.0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::Config(format!("trajectory.duration must be positive, got {}", self.duration)));
        }
        if !ordered(self.amplitude_min, self.amplitude_max) {
            return Err(SimError::Config("trajectory amplitudes must satisfy 0 <= min <= max".into()));
        }
        if !(ordered(self.frequency_min, self.frequency_max) && self.frequency_min > 0.0) {
            return Err(SimError::Config("trajectory frequencies must satisfy 0 < min <= max".into()));
        }
        if !ordered(self.baseline_min, self.baseline_max) {
            return Err(SimError::Config("trajectory baselines must satisfy 0 <= min <= max".into()));
        }
        for (name, v) in [
            ("max_rotation_rate", self.max_rotation_rate),
            ("wobble_amplitude", self.wobble_amplitude),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("trajectory.{name} must be >= 0, got {v}")));
            }
        }
        if !(self.workspace_bound > 0.0) {
            return Err(SimError::Config("trajectory.workspace_bound must be positive".into()));
        }
        Ok(())
    }
}

/// Estimator settings that are not sensor properties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorTuning {
    /// Extra accelerometer-direction noise absorbing unmodelled motion, m/s².
    pub ahrs_accel_dynamic_std: f64,
    /// Relative band around ‖g‖ within which the accelerometer is fused.
    pub ahrs_static_gate: f64,
    pub solver_max_iters: usize,
    pub solver_tol: f64,
    pub iekf_max_iters: usize,
    pub iekf_tol: f64,
    /// s
    pub history_horizon: f64,
}

impl Default for EstimatorTuning {
    fn default() -> Self {
        Self {
            ahrs_accel_dynamic_std: 3.0,
            ahrs_static_gate: 0.1,
            solver_max_iters: 20,
            solver_tol: 1e-8,
            iekf_max_iters: IEKF_MAX_ITERS,
            iekf_tol: IEKF_TOL,
            history_horizon: DEFAULT_HISTORY_HORIZON,
        }
    }
}

/// Complete simulation configuration as read from a TOML file: noise keys at
/// the top level, plus optional `[trajectory]` and `[estimator]` tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(flatten)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub trajectory: TrajectoryParams,
    #[serde(default)]
    pub estimator: EstimatorTuning,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        let known = toml::Table::try_from(SimConfig::default()).expect("default config serializes");
        for (key, value) in &table {
            match (known.get(key), value) {
                (None, _) => return Err(SimError::Config(format!("unknown key `{key}`"))),
                (Some(toml::Value::Table(k)), toml::Value::Table(v)) => {
                    if let Some(sub) = v.keys().find(|s| !k.contains_key(*s)) {
                        return Err(SimError::Config(format!("unknown key `{key}.{sub}`")));
                    }
                }
                _ => {}
            }
        }
        let config: SimConfig = table.try_into().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.noise.validate()?;
        self.trajectory.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Proposed,
    Vanilla,
    Ekf,
    Iekf,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::Proposed, EstimatorKind::Vanilla, EstimatorKind::Ekf, EstimatorKind::Iekf];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Proposed => "proposed",
            EstimatorKind::Vanilla => "vanilla",
            EstimatorKind::Ekf => "ekf",
            EstimatorKind::Iekf => "iekf",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| SimError::Config(format!("unknown estimator `{s}` (expected proposed, vanilla, ekf, iekf)")))
    }
}

/// Parses a comma-separated estimator list, keeping canonical order.
pub fn parse_estimators(list: &str) -> Result<Vec<EstimatorKind>, SimError> {
    let set: BTreeSet<EstimatorKind> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err(SimError::Config("no estimators selected".into()));
    }
    Ok(set.into_iter().collect())
}

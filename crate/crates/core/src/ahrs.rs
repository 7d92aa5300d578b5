//! Per-agent attitude estimation.
//!
//! A multiplicative error-state EKF on SO(3) with the right-perturbation
//! convention `C = Ĉ exp(δφ^×)`. The gyro drives the prediction; the
//! accelerometer (gravity direction, only when quasi-static) and the
//! magnetometer (field direction) drive the correction. The resulting belief
//! resolves raw specific force into common-frame translational acceleration
//! together with its first-order covariance.

use std::io::Read;

use nalgebra::{Matrix3, SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{cross_matrix, so3_exp, Rotation, Vec3};

const CORRECTION_ITERS: usize = 10;
const CORRECTION_TOL: f64 = 1e-12;

/// Gravity in the East-North-Up common frame, m/s².
pub const GRAVITY_ENU: Vec3 = Vec3::new(0.0, 0.0, -9.81);

#[derive(Debug, Error, PartialEq)]
pub enum AhrsError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("reference gravity and field are parallel or zero; heading is unobservable")]
    DegenerateReference,
    #[error("IMU timestamps must be strictly increasing ({prev} then {next})")]
    NonMonotoneTimestamp { prev: f64, next: f64 },
    #[error("non-finite value in IMU sample at t = {0}")]
    NonFinite(f64),
    #[error("IMU CSV: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeBelief {
    pub estimate: Rotation,
    /// Covariance of the right perturbation `δφ`, rad².
    pub covariance: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
    pub mag: Vec3,
}

/// Translational acceleration resolved in the common frame (`ũ_a^acc`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedAcceleration {
    pub timestamp: f64,
    pub mean: Vec3,
    pub covariance: Matrix3<f64>,
}

impl ResolvedAcceleration {
    pub const PAYLOAD_LEN: usize = 9;

    /// Wire payload: 3 mean components then the upper triangle of the
    /// covariance (xx, xy, xz, yy, yz, zz).
    pub fn to_payload(&self) -> [f64; Self::PAYLOAD_LEN] {
        let c = &self.covariance;
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            c[(0, 0)],
            c[(0, 1)],
            c[(0, 2)],
            c[(1, 1)],
            c[(1, 2)],
            c[(2, 2)],
        ]
    }

    pub fn from_payload(timestamp: f64, p: &[f64; Self::PAYLOAD_LEN]) -> Self {
        let covariance = Matrix3::new(p[3], p[4], p[5], p[4], p[6], p[7], p[5], p[7], p[8]);
        Self { timestamp, mean: Vec3::new(p[0], p[1], p[2]), covariance }
    }
}

/// Reference directions in the common frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AhrsReference {
    gravity: Vec3,
    field: Vec3,
}

impl AhrsReference {
    pub fn new(gravity: Vec3, field: Vec3) -> Result<Self, AhrsError> {
        let (gn, fn_) = (gravity.norm(), field.norm());
        if gn == 0.0 || fn_ == 0.0 || gravity.cross(&field).norm() < 1e-6 * gn * fn_ {
            return Err(AhrsError::DegenerateReference);
        }
        Ok(Self { gravity, field })
    }

    pub fn gravity(&self) -> &Vec3 {
        &self.gravity
    }

    pub fn field(&self) -> &Vec3 {
        &self.field
    }
}

/// Sensor noise assumed by the filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AhrsNoise {
    /// Gyro white-noise spectral density, rad²/s.
    pub gyro_psd: f64,
    /// Accelerometer white-noise std. dev. per sample, m/s².
    pub accel_std: f64,
    /// Unmodeled translational acceleration leaking into the gravity
    /// direction when the gate admits a sample, m/s².
    pub accel_dynamic_std: f64,
    /// Magnetometer std. dev. per sample, field units.
    pub mag_std: f64,
    /// Accelerometer admitted for correction only when its norm is within
    /// this fraction of the gravity norm.
    pub static_gate: f64,
}

impl AhrsNoise {
    /// Builds the filter noise from discrete per-sample standard deviations
    /// at the given IMU rate.
    pub fn from_sample_stds(gyro_std: f64, accel_std: f64, mag_std: f64, imu_rate_hz: f64) -> Self {
        Self {
            gyro_psd: gyro_std * gyro_std / imu_rate_hz,
            accel_std,
            accel_dynamic_std: 3.0,
            mag_std,
            static_gate: 0.1,
        }
    }
}

impl AttitudeBelief {
    pub fn new(estimate: Rotation, covariance: Matrix3<f64>) -> Self {
        Self { estimate, covariance }
    }

    /// Propagates through one gyro sample held constant over `dt`.
    pub fn predict(&self, gyro: &Vec3, dt: f64, gyro_psd: f64) -> Result<Self, AhrsError> {
        if !(dt > 0.0) {
            return Err(AhrsError::NonPositiveDt(dt));
        }
        let step = so3_exp(&(gyro * dt));
        // δφ_k = exp(ω dt)^T δφ_{k-1} + noise
        let f = step.matrix().transpose();
        let covariance = f * self.covariance * f.transpose() + Matrix3::identity() * (gyro_psd * dt);
        Ok(Self { estimate: self.estimate * step, covariance: symmetrize3(&covariance) })
    }

    /// Fuses the normalized accelerometer and magnetometer directions.
    ///
    /// Either measurement may be absent; the accelerometer is also skipped
    /// when it fails the quasi-static gate.
    pub fn correct(
        &self,
        accel: Option<&Vec3>,
        mag: Option<&Vec3>,
        reference: &AhrsReference,
        noise: &AhrsNoise,
    ) -> Self {
        let g_norm = reference.gravity.norm();
        let accel = accel.filter(|a| (a.norm() - g_norm).abs() <= noise.static_gate * g_norm);

        let mut rows: Vec<(Vec3, Vec3, f64)> = Vec::with_capacity(2);
        if let Some(a) = accel {
            // At rest the accelerometer senses -C^T g.
            let var = (noise.accel_std.powi(2) + noise.accel_dynamic_std.powi(2)) / (g_norm * g_norm);
            rows.push((a / a.norm(), -reference.gravity / g_norm, var));
        }
        if let Some(m) = mag.filter(|m| m.norm() > 0.0) {
            let f_norm = reference.field.norm();
            rows.push((m / m.norm(), reference.field / f_norm, (noise.mag_std / f_norm).powi(2)));
        }
        match rows.len() {
            0 => *self,
            1 => self.update_rows::<3>(&rows),
            _ => self.update_rows::<6>(&rows),
        }
    }

    /// Iterated update: the direction Jacobians are relinearized about each
    /// iterate so large initial errors are removed in one correction.
    fn update_rows<const M: usize>(&self, rows: &[(Vec3, Vec3, f64)]) -> Self {
        let mut r = SMatrix::<f64, M, M>::zeros();
        for (i, row) in rows.iter().enumerate() {
            for j in 0..3 {
                r[(3 * i + j, 3 * i + j)] = row.2;
            }
        }
        let p = &self.covariance;
        let linearize = |delta: &Vec3| {
            let at = self.estimate * so3_exp(delta);
            let mut h = SMatrix::<f64, M, 3>::zeros();
            let mut innovation = SVector::<f64, M>::zeros();
            for (i, (measured, reference_dir, _)) in rows.iter().enumerate() {
                let predicted = at.inverse_rotate(reference_dir);
                // C^T v ≈ Ĉ^T v + (Ĉ^T v)^× δφ
                h.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&cross_matrix(&predicted));
                innovation.fixed_rows_mut::<3>(3 * i).copy_from(&(measured - predicted));
            }
            let s = h * p * h.transpose() + r;
            s.try_inverse().map(|s_inv| (h, innovation, p * h.transpose() * s_inv))
        };

        let mut delta = Vec3::zeros();
        let mut gain_h = None;
        for _ in 0..CORRECTION_ITERS {
            let Some((h, innovation, gain)) = linearize(&delta) else { break };
            let next = gain * (innovation + h * delta);
            let moved = (next - delta).norm();
            delta = next;
            gain_h = Some((gain, h));
            if moved < CORRECTION_TOL {
                break;
            }
        }
        let Some((gain, h)) = linearize(&delta).map(|(h, _, k)| (k, h)).or(gain_h) else {
            return *self;
        };
        let i_kh = Matrix3::identity() - gain * h;
        let covariance = i_kh * p * i_kh.transpose() + gain * r * gain.transpose();
        Self {
            estimate: self.estimate * so3_exp(&delta),
            covariance: symmetrize3(&covariance),
        }
    }
}

/// Resolves a specific-force sample in the common frame.
///
/// `mean = Ĉ a + g`, `cov = Ĉ Q Ĉ^T + G P G^T` with `G = -Ĉ a^×`.
pub fn resolve_acceleration(
    belief: &AttitudeBelief,
    accel: &Vec3,
    accel_cov: &Matrix3<f64>,
    gravity: &Vec3,
    timestamp: f64,
) -> ResolvedAcceleration {
    let c = belief.estimate.matrix();
    let g = -c * cross_matrix(accel);
    let covariance = c * accel_cov * c.transpose() + g * belief.covariance * g.transpose();
    ResolvedAcceleration { timestamp, mean: c * accel + gravity, covariance: symmetrize3(&covariance) }
}

fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Streaming AHRS for one agent.
#[derive(Clone, Debug)]
pub struct Ahrs {
    belief: AttitudeBelief,
    reference: AhrsReference,
    noise: AhrsNoise,
    last: Option<ImuSample>,
}

impl Ahrs {
    pub fn new(initial: AttitudeBelief, reference: AhrsReference, noise: AhrsNoise) -> Self {
        Self { belief: initial, reference, noise, last: None }
    }

    pub fn belief(&self) -> &AttitudeBelief {
        &self.belief
    }

    /// Predicts with the previous gyro sample, corrects with this sample's
    /// accelerometer and magnetometer, then resolves this sample's specific
    /// force.
    pub fn process(&mut self, sample: &ImuSample) -> Result<ResolvedAcceleration, AhrsError> {
        let finite = [sample.timestamp]
            .into_iter()
            .chain(sample.gyro.iter().copied())
            .chain(sample.accel.iter().copied())
            .chain(sample.mag.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(AhrsError::NonFinite(sample.timestamp));
        }
        if let Some(prev) = &self.last {
            if sample.timestamp <= prev.timestamp {
                return Err(AhrsError::NonMonotoneTimestamp { prev: prev.timestamp, next: sample.timestamp });
            }
            self.belief = self.belief.predict(&prev.gyro, sample.timestamp - prev.timestamp, self.noise.gyro_psd)?;
        }
        self.belief = self.belief.correct(Some(&sample.accel), Some(&sample.mag), &self.reference, &self.noise);
        self.last = Some(*sample);
        let accel_cov = Matrix3::identity() * self.noise.accel_std.powi(2);
        Ok(resolve_acceleration(&self.belief, &sample.accel, &accel_cov, &self.reference.gravity, sample.timestamp))
    }
}

const IMU_COLUMNS: [&str; 10] = ["t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"];

/// Reads an IMU stream with header `t,gx,gy,gz,ax,ay,az,mx,my,mz` (SI units).
pub fn read_imu_csv<R: Read>(reader: R) -> Result<Vec<ImuSample>, AhrsError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(|e| AhrsError::Csv(e.to_string()))?.clone();
    let index: Vec<usize> = IMU_COLUMNS
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| AhrsError::Csv(format!("missing column `{name}`")))
        })
        .collect::<Result<_, _>>()?;

    let mut samples: Vec<ImuSample> = Vec::new();
    for (line, record) in csv.records().enumerate() {
        let record = record.map_err(|e| AhrsError::Csv(e.to_string()))?;
        let mut v = [0.0; 10];
        for (slot, &col) in v.iter_mut().zip(&index) {
            let field = record.get(col).unwrap_or("");
            *slot = field
                .parse()
                .map_err(|_| AhrsError::Csv(format!("row {}: bad number `{field}`", line + 1)))?;
        }
        let sample = ImuSample {
            timestamp: v[0],
            gyro: Vec3::new(v[1], v[2], v[3]),
            accel: Vec3::new(v[4], v[5], v[6]),
            mag: Vec3::new(v[7], v[8], v[9]),
        };
        if let Some(prev) = samples.last() {
            if sample.timestamp <= prev.timestamp {
                return Err(AhrsError::NonMonotoneTimestamp { prev: prev.timestamp, next: sample.timestamp });
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

//! Recursive filter baselines for the relative position problem: an EKF and
//! an iterated EKF sharing the process model of the window estimator.

use nalgebra::{Matrix6, RowVector6, Vector6};

use crate::dynamics::{step_matrices, DynamicsError, RelativeInput, RelativeState};
use crate::swf::ScalarMeasurement;

pub const IEKF_MAX_ITERS: usize = 10;
pub const IEKF_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBelief {
    pub mean: RelativeState,
    pub covariance: Matrix6<f64>,
}

impl FilterBelief {
    pub fn new(mean: RelativeState, covariance: Matrix6<f64>) -> Self {
        Self { mean, covariance }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IteratedUpdate {
    pub belief: FilterBelief,
    pub iterations: usize,
    pub converged: bool,
}

pub fn ekf_predict(belief: &FilterBelief, u: &RelativeInput, dt: f64) -> Result<FilterBelief, DynamicsError> {
    let s = step_matrices(dt, &u.covariance)?;
    let mean = s.a * belief.mean.to_vector() + s.b * u.mean;
    let p = s.a * belief.covariance * s.a.transpose() + s.q;
    Ok(FilterBelief::new(RelativeState::from_vector(&mean), (p + p.transpose()) * 0.5))
}

fn gain(p: &Matrix6<f64>, h: &RowVector6<f64>, r: f64) -> Vector6<f64> {
    let ph = p * h.transpose();
    ph / ((h * ph)[0] + r)
}

fn joseph(p: &Matrix6<f64>, k: &Vector6<f64>, h: &RowVector6<f64>, r: f64) -> Matrix6<f64> {
    let i_kh = Matrix6::identity() - k * h;
    let p = i_kh * p * i_kh.transpose() + k * k.transpose() * r;
    (p + p.transpose()) * 0.5
}

pub fn ekf_update<M: ScalarMeasurement>(belief: &FilterBelief, z: &M) -> Result<FilterBelief, DynamicsError> {
    let x = belief.mean.to_vector();
    let (predicted, h) = z.predict(&x)?;
    let r = z.variance();
    let k = gain(&belief.covariance, &h, r);
    let mean = x + k * (z.value() - predicted);
    Ok(FilterBelief::new(RelativeState::from_vector(&mean), joseph(&belief.covariance, &k, &h, r)))
}

/// Gauss-Newton iterated update: relinearizes at each iterate until the
/// iterate moves less than `tol`.
pub fn iekf_update<M: ScalarMeasurement>(
    belief: &FilterBelief,
    z: &M,
    max_iters: usize,
    tol: f64,
) -> Result<IteratedUpdate, DynamicsError> {
    let prior = belief.mean.to_vector();
    let p = &belief.covariance;
    let r = z.variance();
    let mut x = prior;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters.max(1) {
        let (predicted, h) = z.predict(&x)?;
        let k = gain(p, &h, r);
        let next = prior + k * (z.value() - predicted - (h * (prior - x))[0]);
        iterations += 1;
        let moved = (next - x).norm();
        x = next;
        if moved < tol {
            converged = true;
            break;
        }
    }
    let (_, h) = z.predict(&x)?;
    let k = gain(p, &h, r);
    Ok(IteratedUpdate {
        belief: FilterBelief::new(RelativeState::from_vector(&x), joseph(p, &k, &h, r)),
        iterations,
        converged,
    })
}

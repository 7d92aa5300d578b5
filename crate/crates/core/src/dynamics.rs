//! Relative-state process and range measurement models.
//!
//! The relative state `x = [r; v]` evolves linearly under the difference of
//! the two agents' resolved accelerations, so any stretch of inputs between
//! two time indices collapses into one affine relation
//! `x_j = A_ji x_i + b_ji + w` whose terms never depend on a state estimate.

use nalgebra::{Matrix3, Matrix6, RowVector6, SMatrix, Vector6};
use thiserror::Error;

use crate::ahrs::ResolvedAcceleration;
use crate::geometry::Vec3;

/// Below this separation the unit line-of-sight vector is undefined, m.
pub const RANGE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("cannot pre-integrate an empty input sequence")]
    EmptyInputs,
    #[error("input timestamps must be strictly increasing and end before the interval end")]
    NonMonotone,
    #[error("agent sample streams do not share timestamps")]
    TimestampMismatch,
    #[error("relative position norm {0} is below the range-model singularity threshold")]
    SingularGeometry(f64),
    #[error("factors do not chain: {0} -> {1}")]
    FactorMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeState {
    /// Position of agent 1 relative to agent 2, common frame, m.
    pub position: Vec3,
    /// Relative velocity, m/s.
    pub velocity: Vec3,
}

impl RelativeState {
    pub fn new(position: Vec3, velocity: Vec3) -> Self {
        Self { position, velocity }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
        )
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self { position: x.fixed_rows::<3>(0).into_owned(), velocity: x.fixed_rows::<3>(3).into_owned() }
    }
}

/// Relative acceleration input `u_k = ũ¹ - ũ²` with covariance `Q̃¹ + Q̃²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeInput {
    pub timestamp: f64,
    pub mean: Vec3,
    pub covariance: Matrix3<f64>,
}

impl RelativeInput {
    pub fn from_agents(a1: &ResolvedAcceleration, a2: &ResolvedAcceleration) -> Result<Self, DynamicsError> {
        if a1.timestamp != a2.timestamp {
            return Err(DynamicsError::TimestampMismatch);
        }
        Ok(Self { timestamp: a1.timestamp, mean: a1.mean - a2.mean, covariance: a1.covariance + a2.covariance })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeMeasurement {
    pub timestamp: f64,
    pub distance: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMatrices {
    pub a: Matrix6<f64>,
    pub b: SMatrix<f64, 6, 3>,
    pub q: Matrix6<f64>,
}

pub fn step_matrices(dt: f64, input_cov: &Matrix3<f64>) -> Result<StepMatrices, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    let i3 = Matrix3::identity();
    let mut a = Matrix6::identity();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
    let mut b = SMatrix::<f64, 6, 3>::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(i3 * (dt * dt / 2.0)));
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(i3 * dt));
    let mut q = Matrix6::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(input_cov * (dt * dt * dt / 3.0)));
    q.fixed_view_mut::<3, 3>(0, 3).copy_from(&(input_cov * (dt * dt / 2.0)));
    q.fixed_view_mut::<3, 3>(3, 0).copy_from(&(input_cov * (dt * dt / 2.0)));
    q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(input_cov * dt));
    Ok(StepMatrices { a, b, q })
}

/// Noise-free constant-acceleration step.
pub fn propagate(x: &RelativeState, u: &RelativeInput, dt: f64) -> RelativeState {
    RelativeState {
        position: x.position + x.velocity * dt + u.mean * (dt * dt / 2.0),
        velocity: x.velocity + u.mean * dt,
    }
}

/// Affine process relation between two time indices, with compounded noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreintegratedFactor {
    pub from_index: usize,
    pub to_index: usize,
    pub from_time: f64,
    pub to_time: f64,
    pub transition: Matrix6<f64>,
    pub offset: Vector6<f64>,
    pub noise: Matrix6<f64>,
}

impl PreintegratedFactor {
    /// Predicted state at `to_index` given the state at `from_index`.
    pub fn apply(&self, x: &Vector6<f64>) -> Vector6<f64> {
        self.transition * x + self.offset
    }

    /// Chains `self` (i → j) with `next` (j → k) into i → k.
    pub fn then(&self, next: &PreintegratedFactor) -> Result<PreintegratedFactor, DynamicsError> {
        if self.to_index != next.from_index {
            return Err(DynamicsError::FactorMismatch(self.to_index, next.from_index));
        }
        let a = &next.transition;
        Ok(PreintegratedFactor {
            from_index: self.from_index,
            to_index: next.to_index,
            from_time: self.from_time,
            to_time: next.to_time,
            transition: a * self.transition,
            offset: a * self.offset + next.offset,
            noise: a * self.noise * a.transpose() + next.noise,
        })
    }

    /// Folds a contiguous run of factors into one.
    pub fn chain<'a, I>(factors: I) -> Result<PreintegratedFactor, DynamicsError>
    where
        I: IntoIterator<Item = &'a PreintegratedFactor>,
    {
        let mut iter = factors.into_iter();
        let first = *iter.next().ok_or(DynamicsError::EmptyInputs)?;
        iter.try_fold(first, |acc, f| acc.then(f))
    }

    /// Builds the relative factor from the two agents' independent
    /// contributions: `b = b¹ - b²`, `Q = Q¹ + Q²`.
    pub fn from_contributions(
        from_index: usize,
        to_index: usize,
        agent1: &AgentContribution,
        agent2: &AgentContribution,
    ) -> Result<Self, DynamicsError> {
        if agent1.from_time != agent2.from_time || agent1.to_time != agent2.to_time {
            return Err(DynamicsError::TimestampMismatch);
        }
        Ok(Self {
            from_index,
            to_index,
            from_time: agent1.from_time,
            to_time: agent1.to_time,
            transition: agent1.transition,
            offset: agent1.offset - agent2.offset,
            noise: agent1.noise + agent2.noise,
        })
    }
}

fn check_times(times: impl Iterator<Item = f64>, end_time: f64) -> Result<Vec<f64>, DynamicsError> {
    let mut t: Vec<f64> = times.collect();
    if t.is_empty() {
        return Err(DynamicsError::EmptyInputs);
    }
    t.push(end_time);
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DynamicsError::NonMonotone);
    }
    Ok(t)
}

/// Iterates the process model over `inputs`, each held until the next
/// input's timestamp (the last one until `end_time`).
fn accumulate<'a>(
    times: &[f64],
    inputs: impl Iterator<Item = (&'a Vec3, &'a Matrix3<f64>)>,
) -> Result<(Matrix6<f64>, Vector6<f64>, Matrix6<f64>), DynamicsError> {
    let mut transition = Matrix6::identity();
    let mut offset = Vector6::zeros();
    let mut noise = Matrix6::zeros();
    for (w, (mean, cov)) in times.windows(2).zip(inputs) {
        let s = step_matrices(w[1] - w[0], cov)?;
        transition = s.a * transition;
        offset = s.a * offset + s.b * mean;
        noise = s.a * noise * s.a.transpose() + s.q;
    }
    Ok((transition, offset, (noise + noise.transpose()) * 0.5))
}

/// Collapses relative inputs covering `[t_i, end_time)` into one factor.
pub fn preintegrate(
    inputs: &[RelativeInput],
    end_time: f64,
    from_index: usize,
    to_index: usize,
) -> Result<PreintegratedFactor, DynamicsError> {
    let times = check_times(inputs.iter().map(|u| u.timestamp), end_time)?;
    let (transition, offset, noise) = accumulate(&times, inputs.iter().map(|u| (&u.mean, &u.covariance)))?;
    Ok(PreintegratedFactor {
        from_index,
        to_index,
        from_time: times[0],
        to_time: end_time,
        transition,
        offset,
        noise,
    })
}

/// One agent's share of a factor, computed from its own resolved
/// accelerations only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentContribution {
    pub from_time: f64,
    pub to_time: f64,
    pub transition: Matrix6<f64>,
    pub offset: Vector6<f64>,
    pub noise: Matrix6<f64>,
}

pub fn preintegrate_agent(samples: &[ResolvedAcceleration], end_time: f64) -> Result<AgentContribution, DynamicsError> {
    let times = check_times(samples.iter().map(|s| s.timestamp), end_time)?;
    let (transition, offset, noise) = accumulate(&times, samples.iter().map(|s| (&s.mean, &s.covariance)))?;
    Ok(AgentContribution { from_time: times[0], to_time: end_time, transition, offset, noise })
}

/// Per-agent offsets `(b¹, b²)` with `b¹ - b² = b_ji`.
pub fn split_offset(
    agent1: &[ResolvedAcceleration],
    agent2: &[ResolvedAcceleration],
    end_time: f64,
) -> Result<(Vector6<f64>, Vector6<f64>), DynamicsError> {
    if agent1.len() != agent2.len() || agent1.iter().zip(agent2).any(|(a, b)| a.timestamp != b.timestamp) {
        return Err(DynamicsError::TimestampMismatch);
    }
    let c1 = preintegrate_agent(agent1, end_time)?;
    let c2 = preintegrate_agent(agent2, end_time)?;
    Ok((c1.offset, c2.offset))
}

/// Predicted range `‖r‖` and its Jacobian `[ρ^T 0]`.
pub fn range_model(x: &Vector6<f64>) -> Result<(f64, RowVector6<f64>), DynamicsError> {
    let r = x.fixed_rows::<3>(0);
    let norm = r.norm();
    if !(norm > RANGE_EPSILON) {
        return Err(DynamicsError::SingularGeometry(norm));
    }
    let rho = r / norm;
    Ok((norm, RowVector6::new(rho.x, rho.y, rho.z, 0.0, 0.0, 0.0)))
}

//! Sliding window filter over relative position and velocity: windowed
//! least squares on keypoint states, Gauss-Newton, and marginalization of
//! states leaving the window into a Gaussian prior.

mod estimator;
mod solver;
mod window;

pub use estimator::{
    Estimate, KeypointPolicy, SlidingWindowFilter, SwfConfig, WindowDump, DEFAULT_POSITION_STD,
    DEFAULT_VELOCITY_STD,
};
pub use solver::{gauss_newton_solve, marginalize, window_cost, Solution, SolverOptions};
pub use window::{
    build_error_system, ErrorSystem, Prior, ResidualBlock, ScalarMeasurement, Window, PRIOR_CONDITIONING,
};

use nalgebra::Vector6;
use thiserror::Error;

use crate::dynamics::{DynamicsError, PreintegratedFactor};
use crate::keypoints::KeypointError;

#[derive(Debug, Error, PartialEq)]
pub enum SwfError {
    #[error("factor {from}->{to} has a singular noise covariance")]
    IllConditionedFactor { from: usize, to: usize },
    #[error("measurement at node {node} has a non-positive variance")]
    IllConditionedMeasurement { node: usize },
    #[error("degenerate geometry: normal matrix condition number {condition:e}")]
    Degenerate { condition: f64 },
    #[error("marginalization sub-problem is singular")]
    MarginalizationDegenerate,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("non-finite values in the window")]
    NonFinite,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
}

/// Per-index data the window is rebuilt from when it slides.
pub trait EpochData<M> {
    /// Factor linking two time indices, composed from the per-index factors.
    fn factor(&self, from: usize, to: usize) -> Result<PreintegratedFactor, SwfError>;
    fn measurement(&self, index: usize) -> Option<M>;
    /// Best available state estimate at an index, used to seed new keypoints.
    fn seed(&self, index: usize) -> Option<Vector6<f64>>;
}

/// Builds the next window on `new_keypoints`, whose first entry becomes the
/// new prior anchor.
pub fn slide<M: ScalarMeasurement, D: EpochData<M> + ?Sized>(
    window: &Window<M>,
    solved_states: &[Vector6<f64>],
    new_keypoints: &[usize],
    data: &D,
) -> Result<Window<M>, SwfError> {
    let Some(&anchor) = new_keypoints.first() else {
        return Err(SwfError::InvalidWindow("no keypoints".into()));
    };
    let keypoints = window.keypoints();
    if anchor < keypoints[0] {
        return Err(SwfError::InvalidWindow(format!(
            "new anchor {anchor} precedes the old window start {}",
            keypoints[0]
        )));
    }

    let prior = if anchor == keypoints[0] {
        *window.prior()
    } else if window.position_of(anchor).is_some() {
        marginalize(window, solved_states, anchor, None)?
    } else {
        let before = keypoints[keypoints.partition_point(|&p| p < anchor) - 1];
        let ext = data.factor(before, anchor)?;
        marginalize(window, solved_states, anchor, Some(&ext))?
    };

    let factors = new_keypoints
        .windows(2)
        .map(|w| data.factor(w[0], w[1]))
        .collect::<Result<Vec<_>, _>>()?;
    let measurements = new_keypoints
        .iter()
        .map(|&i| data.measurement(i))
        .collect();

    let mut states: Vec<Vector6<f64>> = Vec::with_capacity(new_keypoints.len());
    for (n, &i) in new_keypoints.iter().enumerate() {
        let state = match window.position_of(i) {
            Some(j) => solved_states[j],
            None => match data.seed(i) {
                Some(x) => x,
                None if n == 0 => prior.mean,
                None => factors[n - 1].apply(&states[n - 1]),
            },
        };
        states.push(state);
    }
    if anchor != keypoints[0] && window.position_of(anchor).is_none() {
        states[0] = prior.mean;
    }
    Window::new(new_keypoints.to_vec(), states, factors, measurements, prior)
}

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix6, Vector6};

use super::window::{Chain, ErrorSystem, Prior, ScalarMeasurement, Window};
use super::SwfError;
use crate::dynamics::PreintegratedFactor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Convergence threshold on the step norm.
    pub tol: f64,
    pub max_halvings: usize,
    /// Normal matrices above this condition number are rejected.
    pub max_condition: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 20, tol: 1e-8, max_halvings: 8, max_condition: 1e12 }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub states: Vec<Vector6<f64>>,
    /// `H^T W H` at the returned states.
    pub information: DMatrix<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    factor: Cholesky<f64, Dyn>,
}

impl Solution {
    /// Marginal covariance of one keypoint, read from the inverse information.
    pub fn covariance(&self, node: usize) -> Matrix6<f64> {
        let n = self.information.nrows();
        let mut rhs = DMatrix::zeros(n, 6);
        for k in 0..6 {
            rhs[(6 * node + k, k)] = 1.0;
        }
        let cols = self.factor.solve(&rhs);
        let block: Matrix6<f64> = cols.fixed_view::<6, 6>(6 * node, 0).into_owned();
        (block + block.transpose()) * 0.5
    }

    /// Full inverse of the information matrix.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

fn condition_number(info: &DMatrix<f64>) -> f64 {
    let eig = info.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn factorize(info: &DMatrix<f64>, max_condition: f64) -> Result<Cholesky<f64, Dyn>, SwfError> {
    if !info.iter().all(|v| v.is_finite()) {
        return Err(SwfError::NonFinite);
    }
    let condition = condition_number(info);
    if condition > max_condition {
        return Err(SwfError::Degenerate { condition });
    }
    Cholesky::new(info.clone()).ok_or(SwfError::Degenerate { condition: f64::INFINITY })
}

fn apply_step(states: &[Vector6<f64>], step: &DVector<f64>, scale: f64) -> Vec<Vector6<f64>> {
    states
        .iter()
        .enumerate()
        .map(|(i, x)| x + step.fixed_rows::<6>(6 * i) * scale)
        .collect()
}

fn solve_chain<M: ScalarMeasurement>(
    chain: &Chain<'_, M>,
    initial: &[Vector6<f64>],
    options: &SolverOptions,
) -> Result<Solution, SwfError> {
    let mut states = initial.to_vec();
    let mut system = chain.build(&states)?;
    let initial_cost = system.cost();
    let mut cost = initial_cost;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iters {
        let (info, grad) = system.normal_equations();
        let factor = factorize(&info, options.max_condition)?;
        let step = -factor.solve(&grad);
        iterations += 1;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let trial = apply_step(&states, &step, scale);
            let trial_system = chain.build(&trial)?;
            let trial_cost = trial_system.cost();
            if trial_cost.is_finite() && trial_cost <= cost {
                accepted = Some((trial, trial_system, trial_cost));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, trial_system, trial_cost)) = accepted else {
            // No descent along the Gauss-Newton direction: the current
            // iterate is the best available.
            converged = step.norm() < options.tol.sqrt();
            break;
        };
        states = trial;
        system = trial_system;
        cost = trial_cost;
        if step.norm() * scale < options.tol {
            converged = true;
            break;
        }
    }

    let (information, _) = system.normal_equations();
    let factor = factorize(&information, options.max_condition)?;
    Ok(Solution { states, information, cost, initial_cost, iterations, converged, factor })
}

/// Gauss-Newton with a step-halving line search, starting from the window's
/// stored states.
pub fn gauss_newton_solve<M: ScalarMeasurement>(
    window: &Window<M>,
    options: &SolverOptions,
) -> Result<Solution, SwfError> {
    solve_chain(&window.chain(), window.states(), options)
}

/// Cost of the window's error system at the given states.
pub fn window_cost<M: ScalarMeasurement>(window: &Window<M>, states: &[Vector6<f64>]) -> Result<f64, SwfError> {
    Ok(super::window::build_error_system(window, states)?.cost())
}

/// Gaussian approximation of the window's information up to keypoint index
/// `anchor`, returned as a prior on that state.
///
/// The sub-problem keeps the prior, the factors up to `anchor` and the
/// measurements strictly before it. When `anchor` is not itself a keypoint,
/// `extension` must link the last keypoint before it to `anchor`.
pub fn marginalize<M: ScalarMeasurement>(
    window: &Window<M>,
    solved_states: &[Vector6<f64>],
    anchor: usize,
    extension: Option<&PreintegratedFactor>,
) -> Result<Prior, SwfError> {
    if solved_states.len() != window.len() {
        return Err(SwfError::InvalidWindow("one solved state per keypoint required".into()));
    }
    let keypoints = window.keypoints();
    if anchor < keypoints[0] {
        return Err(SwfError::InvalidWindow(format!(
            "anchor {anchor} precedes the window start {}",
            keypoints[0]
        )));
    }

    let (mut nodes, ext) = match window.position_of(anchor) {
        Some(j) => (j + 1, None),
        None => {
            let ext = extension.ok_or_else(|| {
                SwfError::InvalidWindow(format!("anchor {anchor} is not a keypoint and no linking factor given"))
            })?;
            let j = keypoints.partition_point(|&p| p < anchor);
            if ext.from_index != keypoints[j - 1] || ext.to_index != anchor {
                return Err(SwfError::InvalidWindow("linking factor endpoints do not match".into()));
            }
            (j, Some(ext))
        }
    };

    let mut factors: Vec<&PreintegratedFactor> = window.factors()[..nodes - 1].iter().collect();
    let mut states = solved_states[..nodes].to_vec();
    let mut measurements: Vec<Option<&M>> = window.measurements()[..nodes].iter().map(Option::as_ref).collect();
    if let Some(ext) = ext {
        factors.push(ext);
        states.push(ext.apply(&states[nodes - 1]));
        measurements.push(None);
        nodes += 1;
    }
    measurements[nodes - 1] = None;

    let chain = Chain { prior: window.prior(), factors, measurements };
    let system: ErrorSystem = chain.build(&states)?;
    let (info, grad) = system.normal_equations();
    let cholesky = Cholesky::new(info).ok_or(SwfError::MarginalizationDegenerate)?;
    let delta = cholesky.solve(&grad);
    let last = 6 * (nodes - 1);
    let mean = states[nodes - 1] - delta.fixed_rows::<6>(last);

    let mut rhs = DMatrix::zeros(6 * nodes, 6);
    for k in 0..6 {
        rhs[(last + k, k)] = 1.0;
    }
    let covariance: Matrix6<f64> = cholesky.solve(&rhs).fixed_view::<6, 6>(last, 0).into_owned();
    Prior::new(mean, covariance, anchor)
}

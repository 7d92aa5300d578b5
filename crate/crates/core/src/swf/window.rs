use nalgebra::{DMatrix, DVector, Matrix6, RowVector6, Vector6};

use super::SwfError;
use crate::dynamics::{range_model, DynamicsError, PreintegratedFactor, RangeMeasurement};

/// Floor applied to a prior covariance's spectrum before inversion.
pub const PRIOR_CONDITIONING: f64 = 1e-12;

/// A scalar observation of one keypoint state.
///
/// Implemented for [`RangeMeasurement`]; other models (e.g. a linear
/// position projection used to check marginalization against an exact
/// Gaussian result) plug in the same way.
pub trait ScalarMeasurement: Clone {
    fn timestamp(&self) -> f64;
    fn value(&self) -> f64;
    fn variance(&self) -> f64;
    /// Predicted value and its Jacobian with respect to the state.
    fn predict(&self, x: &Vector6<f64>) -> Result<(f64, RowVector6<f64>), DynamicsError>;
}

impl ScalarMeasurement for RangeMeasurement {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }

    fn value(&self) -> f64 {
        self.distance
    }

    fn variance(&self) -> f64 {
        self.variance
    }

    fn predict(&self, x: &Vector6<f64>) -> Result<(f64, RowVector6<f64>), DynamicsError> {
        range_model(x)
    }
}

/// Gaussian prior on the oldest keypoint state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    pub anchor_index: usize,
    information: Matrix6<f64>,
}

impl Prior {
    pub fn new(mean: Vector6<f64>, covariance: Matrix6<f64>, anchor_index: usize) -> Result<Self, SwfError> {
        let mut covariance = (covariance + covariance.transpose()) * 0.5;
        if !covariance.iter().all(|v| v.is_finite()) {
            return Err(SwfError::NonFinite);
        }
        if covariance.symmetric_eigenvalues().min() < PRIOR_CONDITIONING {
            covariance += Matrix6::identity() * PRIOR_CONDITIONING;
        }
        let information = covariance
            .cholesky()
            .ok_or(SwfError::MarginalizationDegenerate)?
            .inverse();
        let information = (information + information.transpose()) * 0.5;
        Ok(Self { mean, covariance, anchor_index, information })
    }

    pub fn information(&self) -> &Matrix6<f64> {
        &self.information
    }
}

/// Keypoint states, the factors linking them, one measurement per keypoint
/// and a prior on the first keypoint.
#[derive(Clone, Debug)]
pub struct Window<M = RangeMeasurement> {
    keypoints: Vec<usize>,
    states: Vec<Vector6<f64>>,
    factors: Vec<PreintegratedFactor>,
    measurements: Vec<Option<M>>,
    prior: Prior,
}

impl<M: ScalarMeasurement> Window<M> {
    pub fn new(
        keypoints: Vec<usize>,
        states: Vec<Vector6<f64>>,
        factors: Vec<PreintegratedFactor>,
        measurements: Vec<Option<M>>,
        prior: Prior,
    ) -> Result<Self, SwfError> {
        let invalid = |msg: &str| Err(SwfError::InvalidWindow(msg.to_string()));
        if keypoints.is_empty() {
            return invalid("no keypoints");
        }
        if keypoints.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("keypoint indices must be strictly increasing");
        }
        if states.len() != keypoints.len() || measurements.len() != keypoints.len() {
            return invalid("one state and one measurement per keypoint required");
        }
        if factors.len() + 1 != keypoints.len() {
            return invalid("exactly one factor per adjacent keypoint pair required");
        }
        if factors
            .iter()
            .zip(keypoints.windows(2))
            .any(|(f, w)| f.from_index != w[0] || f.to_index != w[1])
        {
            return invalid("factor endpoints must match adjacent keypoints");
        }
        if prior.anchor_index != keypoints[0] {
            return invalid("prior must be anchored at the first keypoint");
        }
        Ok(Self { keypoints, states, factors, measurements, prior })
    }

    pub fn keypoints(&self) -> &[usize] {
        &self.keypoints
    }

    pub fn states(&self) -> &[Vector6<f64>] {
        &self.states
    }

    pub fn factors(&self) -> &[PreintegratedFactor] {
        &self.factors
    }

    /// One entry per keypoint; a keypoint may carry no measurement.
    pub fn measurements(&self) -> &[Option<M>] {
        &self.measurements
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.keypoints.binary_search(&index).ok()
    }

    pub(crate) fn set_states(&mut self, states: Vec<Vector6<f64>>) {
        debug_assert_eq!(states.len(), self.keypoints.len());
        self.states = states;
    }

    pub(crate) fn chain(&self) -> Chain<'_, M> {
        Chain {
            prior: &self.prior,
            factors: self.factors.iter().collect(),
            measurements: self.measurements.iter().map(Option::as_ref).collect(),
        }
    }
}

/// A linear chain of nodes: prior on node 0, factor `i` links node `i` to
/// `i + 1`, and node `i` optionally carries a measurement.
pub(crate) struct Chain<'a, M> {
    pub prior: &'a Prior,
    pub factors: Vec<&'a PreintegratedFactor>,
    pub measurements: Vec<Option<&'a M>>,
}

impl<M: ScalarMeasurement> Chain<'_, M> {
    pub fn nodes(&self) -> usize {
        self.measurements.len()
    }

    pub fn build(&self, states: &[Vector6<f64>]) -> Result<ErrorSystem, SwfError> {
        debug_assert_eq!(states.len(), self.nodes());
        let mut blocks = Vec::with_capacity(1 + self.factors.len() + self.measurements.len());
        blocks.push(ResidualBlock::Prior {
            error: states[0] - self.prior.mean,
            weight: *self.prior.information(),
        });
        for (i, f) in self.factors.iter().enumerate() {
            let weight = f
                .noise
                .cholesky()
                .ok_or(SwfError::IllConditionedFactor { from: f.from_index, to: f.to_index })?
                .inverse();
            let weight = (weight + weight.transpose()) * 0.5;
            blocks.push(ResidualBlock::Process {
                from: i,
                error: states[i + 1] - f.apply(&states[i]),
                weight,
                jacobian_from: -f.transition,
            });
        }
        for (i, m) in self.measurements.iter().enumerate() {
            let Some(m) = m else { continue };
            let variance = m.variance();
            if !(variance > 0.0) {
                return Err(SwfError::IllConditionedMeasurement { node: i });
            }
            let (predicted, jac) = m.predict(&states[i])?;
            blocks.push(ResidualBlock::Measurement {
                node: i,
                error: m.value() - predicted,
                weight: 1.0 / variance,
                jacobian: -jac,
            });
        }
        Ok(ErrorSystem { blocks, nodes: states.len() })
    }
}

/// One weighted residual block and its nonzero Jacobian blocks.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualBlock {
    /// `x_0 - μ`, Jacobian `I` on node 0.
    Prior { error: Vector6<f64>, weight: Matrix6<f64> },
    /// `x_{i+1} - (A x_i + b)`, Jacobians `-A` on node `i` and `I` on `i + 1`.
    Process { from: usize, error: Vector6<f64>, weight: Matrix6<f64>, jacobian_from: Matrix6<f64> },
    /// `y - h(x_i)`, Jacobian `-∂h/∂x` on node `i`.
    Measurement { node: usize, error: f64, weight: f64, jacobian: RowVector6<f64> },
}

impl ResidualBlock {
    pub fn rows(&self) -> usize {
        match self {
            ResidualBlock::Measurement { .. } => 1,
            _ => 6,
        }
    }

    /// Nodes touched by this block's Jacobian.
    pub fn nodes(&self) -> Vec<usize> {
        match self {
            ResidualBlock::Prior { .. } => vec![0],
            ResidualBlock::Process { from, .. } => vec![*from, from + 1],
            ResidualBlock::Measurement { node, .. } => vec![*node],
        }
    }

    fn cost(&self) -> f64 {
        match self {
            ResidualBlock::Prior { error, weight } | ResidualBlock::Process { error, weight, .. } => {
                error.dot(&(weight * error))
            }
            ResidualBlock::Measurement { error, weight, .. } => error * error * weight,
        }
    }
}

/// Stacked residuals `e`, block-diagonal weights `W` and block-sparse
/// Jacobian `H = ∂e/∂x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSystem {
    pub blocks: Vec<ResidualBlock>,
    pub nodes: usize,
}

impl ErrorSystem {
    pub fn rows(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::rows).sum()
    }

    /// Weighted cost `e^T W e`.
    pub fn cost(&self) -> f64 {
        self.blocks.iter().map(ResidualBlock::cost).sum()
    }

    pub fn stacked_error(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.rows());
        let mut row = 0;
        for b in &self.blocks {
            match b {
                ResidualBlock::Prior { error, .. } | ResidualBlock::Process { error, .. } => {
                    e.fixed_rows_mut::<6>(row).copy_from(error)
                }
                ResidualBlock::Measurement { error, .. } => e[row] = *error,
            }
            row += b.rows();
        }
        e
    }

    pub fn weight(&self) -> DMatrix<f64> {
        let n = self.rows();
        let mut w = DMatrix::zeros(n, n);
        let mut row = 0;
        for b in &self.blocks {
            match b {
                ResidualBlock::Prior { weight, .. } | ResidualBlock::Process { weight, .. } => {
                    w.fixed_view_mut::<6, 6>(row, row).copy_from(weight)
                }
                ResidualBlock::Measurement { weight, .. } => w[(row, row)] = *weight,
            }
            row += b.rows();
        }
        w
    }

    /// Dense copy of the Jacobian, mainly for inspection and tests.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows(), 6 * self.nodes);
        let mut row = 0;
        for b in &self.blocks {
            match b {
                ResidualBlock::Prior { .. } => h.fixed_view_mut::<6, 6>(row, 0).copy_from(&Matrix6::identity()),
                ResidualBlock::Process { from, jacobian_from, .. } => {
                    h.fixed_view_mut::<6, 6>(row, 6 * from).copy_from(jacobian_from);
                    h.fixed_view_mut::<6, 6>(row, 6 * (from + 1)).copy_from(&Matrix6::identity());
                }
                ResidualBlock::Measurement { node, jacobian, .. } => {
                    h.fixed_view_mut::<1, 6>(row, 6 * node).copy_from(jacobian)
                }
            }
            row += b.rows();
        }
        h
    }

    /// `(H^T W H, H^T W e)` accumulated block by block.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = 6 * self.nodes;
        let mut info = DMatrix::zeros(n, n);
        let mut grad = DVector::zeros(n);
        for b in &self.blocks {
            match b {
                ResidualBlock::Prior { error, weight } => {
                    add_block(&mut info, 0, 0, weight);
                    add_rows(&mut grad, 0, &(weight * error));
                }
                ResidualBlock::Process { from, error, weight, jacobian_from } => {
                    let (i, j) = (6 * from, 6 * (from + 1));
                    let jt_w = jacobian_from.transpose() * weight;
                    add_block(&mut info, i, i, &(jt_w * jacobian_from));
                    add_block(&mut info, i, j, &jt_w);
                    add_block(&mut info, j, i, &jt_w.transpose());
                    add_block(&mut info, j, j, weight);
                    let we = weight * error;
                    add_rows(&mut grad, i, &(jacobian_from.transpose() * we));
                    add_rows(&mut grad, j, &we);
                }
                ResidualBlock::Measurement { node, error, weight, jacobian } => {
                    let i = 6 * node;
                    let jt = jacobian.transpose();
                    add_block(&mut info, i, i, &(jt * jacobian * *weight));
                    add_rows(&mut grad, i, &(jt * (weight * error)));
                }
            }
        }
        let info = (&info + info.transpose()) * 0.5;
        (info, grad)
    }
}

fn add_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix6<f64>) {
    let mut view = m.fixed_view_mut::<6, 6>(r, c);
    view += b;
}

fn add_rows(v: &mut DVector<f64>, r: usize, b: &Vector6<f64>) {
    let mut view = v.fixed_rows_mut::<6>(r);
    view += b;
}

/// Stacks the error system of a window at the given linearization states.
pub fn build_error_system<M: ScalarMeasurement>(
    window: &Window<M>,
    states: &[Vector6<f64>],
) -> Result<ErrorSystem, SwfError> {
    if states.len() != window.len() {
        return Err(SwfError::InvalidWindow("one linearization state per keypoint required".into()));
    }
    window.chain().build(states)
}

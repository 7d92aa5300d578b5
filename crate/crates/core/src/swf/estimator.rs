use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::solver::{gauss_newton_solve, Solution, SolverOptions};
use super::window::{Prior, ScalarMeasurement, Window};
use super::{slide, EpochData, SwfError};
use crate::dynamics::{PreintegratedFactor, RangeMeasurement, RelativeState};
use crate::geometry::Vec3;
use crate::keypoints::{
    most_recent_keypoints, select_keypoints, History, KeypointCandidate, SelectionParams, DEFAULT_HISTORY_HORIZON,
};

/// Cold-start prior standard deviations, m and m/s.
pub const DEFAULT_POSITION_STD: f64 = 0.8;
pub const DEFAULT_VELOCITY_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeypointPolicy {
    /// GDOP-driven greedy selection weighted by time span.
    Greedy { gamma: f64 },
    /// The `K` most recent range epochs.
    MostRecent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwfConfig {
    pub window_size: usize,
    pub policy: KeypointPolicy,
    /// Candidate keypoints older than this many seconds are discarded.
    pub horizon: f64,
    pub solver: SolverOptions,
}

impl Default for SwfConfig {
    fn default() -> Self {
        Self {
            window_size: 20,
            policy: KeypointPolicy::Greedy { gamma: 100.0 },
            horizon: DEFAULT_HISTORY_HORIZON,
            solver: SolverOptions::default(),
        }
    }
}

/// Output of one window solve, reported at the newest index.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub index: usize,
    pub timestamp: f64,
    pub state: RelativeState,
    pub covariance: Matrix6<f64>,
    pub keypoints: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Keypoint selection ran out of candidates.
    pub short: bool,
}

/// Serializable snapshot of the last solved window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDump {
    pub keypoints: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub states: Vec<[f64; 6]>,
    pub covariances: Vec<[[f64; 6]; 6]>,
    pub prior_anchor: usize,
    pub cost: f64,
}

#[derive(Clone, Debug)]
struct Epoch<M> {
    timestamp: f64,
    measurement: M,
    incoming: Option<PreintegratedFactor>,
    estimate: Vector6<f64>,
}

struct Epochs<'a, M>(&'a [Epoch<M>]);

impl<M: ScalarMeasurement> EpochData<M> for Epochs<'_, M> {
    fn factor(&self, from: usize, to: usize) -> Result<PreintegratedFactor, SwfError> {
        if to <= from || to >= self.0.len() {
            return Err(SwfError::InvalidWindow(format!("no factor chain {from}->{to}")));
        }
        let factors = self.0[from + 1..=to].iter().filter_map(|e| e.incoming.as_ref());
        Ok(PreintegratedFactor::chain(factors)?)
    }

    fn measurement(&self, index: usize) -> Option<M> {
        self.0.get(index).map(|e| e.measurement.clone())
    }

    fn seed(&self, index: usize) -> Option<Vector6<f64>> {
        self.0.get(index).map(|e| e.estimate)
    }
}

/// Relative position estimator: one measurement per time index, linked by
/// per-index factors, solved over a sliding set of keypoints.
#[derive(Clone, Debug)]
pub struct SlidingWindowFilter<M = RangeMeasurement> {
    config: SwfConfig,
    initial_prior: Prior,
    epochs: Vec<Epoch<M>>,
    window: Option<Window<M>>,
    solution: Option<Solution>,
}

impl<M: ScalarMeasurement> SlidingWindowFilter<M> {
    pub fn new(config: SwfConfig, initial_prior: Prior) -> Result<Self, SwfError> {
        if config.window_size == 0 {
            return Err(SwfError::InvalidWindow("window size must be positive".into()));
        }
        if matches!(config.policy, KeypointPolicy::Greedy { .. }) && config.window_size < 4 {
            return Err(SwfError::InvalidWindow("greedy selection needs a window of at least 4".into()));
        }
        if initial_prior.anchor_index != 0 {
            return Err(SwfError::InvalidWindow("initial prior must be anchored at index 0".into()));
        }
        Ok(Self { config, initial_prior, epochs: Vec::new(), window: None, solution: None })
    }

    /// Cold-start prior with the default standard deviations.
    pub fn default_prior(mean: &RelativeState) -> Prior {
        let mut cov = Matrix6::zeros();
        for i in 0..3 {
            cov[(i, i)] = DEFAULT_POSITION_STD * DEFAULT_POSITION_STD;
            cov[(i + 3, i + 3)] = DEFAULT_VELOCITY_STD * DEFAULT_VELOCITY_STD;
        }
        Prior::new(mean.to_vector(), cov, 0).expect("diagonal prior is positive definite")
    }

    pub fn config(&self) -> &SwfConfig {
        &self.config
    }

    /// Number of time indices pushed so far.
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn window(&self) -> Option<&Window<M>> {
        self.window.as_ref()
    }

    pub fn solution(&self) -> Option<&Solution> {
        self.solution.as_ref()
    }

    /// Appends time index `len()`; `factor` links the previous index to it
    /// and must be absent for index 0.
    pub fn push(&mut self, factor: Option<PreintegratedFactor>, measurement: M) -> Result<usize, SwfError> {
        let index = self.epochs.len();
        let estimate = match (index, &factor) {
            (0, None) => self.initial_prior.mean,
            (0, Some(_)) => return Err(SwfError::InvalidWindow("index 0 takes no incoming factor".into())),
            (_, None) => return Err(SwfError::InvalidWindow(format!("index {index} needs an incoming factor"))),
            (_, Some(f)) => {
                if f.from_index != index - 1 || f.to_index != index {
                    return Err(SwfError::InvalidWindow(format!(
                        "factor {}->{} does not end at index {index}",
                        f.from_index, f.to_index
                    )));
                }
                f.apply(&self.epochs[index - 1].estimate)
            }
        };
        self.epochs.push(Epoch { timestamp: measurement.timestamp(), measurement, incoming: factor, estimate });
        Ok(index)
    }

    fn select(&self, k: usize) -> Result<(Vec<usize>, bool), SwfError> {
        let size = self.config.window_size;
        if k < size {
            return Ok(((0..=k).collect(), false));
        }
        match self.config.policy {
            KeypointPolicy::MostRecent => Ok((most_recent_keypoints(k, size), false)),
            KeypointPolicy::Greedy { gamma } => {
                let previous = self.window.as_ref().map(|w| w.keypoints().to_vec()).unwrap_or_default();
                let start = previous.first().copied().unwrap_or(0);
                let candidates = self.candidates(start, k);
                let params = SelectionParams { window_size: size, gamma, horizon: self.config.horizon };
                let selection = select_keypoints(k, &params, &previous, &History::new(&candidates))?;
                Ok((selection.keypoints, selection.short))
            }
        }
    }

    fn candidates(&self, start: usize, end: usize) -> Vec<KeypointCandidate> {
        let mut fallback = Vec3::x();
        self.epochs[start..=end]
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let position: Vec3 = e.estimate.fixed_rows::<3>(0).into_owned();
                let c = KeypointCandidate::new(start + i, e.timestamp, &position)
                    .or_else(|_| KeypointCandidate::new(start + i, e.timestamp, &fallback))
                    .expect("fallback direction is a unit vector");
                fallback = *c.direction();
                c
            })
            .collect()
    }

    /// Selects keypoints for the newest index, slides the window and solves.
    pub fn solve(&mut self) -> Result<Estimate, SwfError> {
        let k = self.epochs.len().checked_sub(1).ok_or(SwfError::InvalidWindow("no data".into()))?;
        let (keypoints, short) = self.select(k)?;

        let data = Epochs(&self.epochs);
        let next = match &self.window {
            Some(w) => slide(w, w.states(), &keypoints, &data)?,
            None => {
                let start = Window::new(
                    vec![0],
                    vec![self.initial_prior.mean],
                    Vec::new(),
                    vec![Some(self.epochs[0].measurement.clone())],
                    self.initial_prior,
                )?;
                if keypoints == [0] {
                    start
                } else {
                    slide(&start, start.states(), &keypoints, &data)?
                }
            }
        };

        let solution = gauss_newton_solve(&next, &self.config.solver)?;
        let mut next = next;
        next.set_states(solution.states.clone());
        for (&i, x) in keypoints.iter().zip(&solution.states) {
            self.epochs[i].estimate = *x;
        }

        let last = keypoints.len() - 1;
        let estimate = Estimate {
            index: k,
            timestamp: self.epochs[k].timestamp,
            state: RelativeState::from_vector(&solution.states[last]),
            covariance: solution.covariance(last),
            keypoints,
            iterations: solution.iterations,
            converged: solution.converged,
            short,
        };
        self.window = Some(next);
        self.solution = Some(solution);
        Ok(estimate)
    }

    /// Pushes one index and solves.
    pub fn step(&mut self, factor: Option<PreintegratedFactor>, measurement: M) -> Result<Estimate, SwfError> {
        self.push(factor, measurement)?;
        self.solve()
    }

    /// State and covariance of every keypoint of the last solved window.
    pub fn dump(&self) -> Option<WindowDump> {
        let (window, solution) = (self.window.as_ref()?, self.solution.as_ref()?);
        let matrix = |m: Matrix6<f64>| std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        Some(WindowDump {
            keypoints: window.keypoints().to_vec(),
            timestamps: window.keypoints().iter().map(|&i| self.epochs[i].timestamp).collect(),
            states: solution.states.iter().map(|x| std::array::from_fn(|i| x[i])).collect(),
            covariances: (0..window.len()).map(|n| matrix(solution.covariance(n))).collect(),
            prior_anchor: window.prior().anchor_index,
            cost: solution.cost,
        })
    }
}

//! Observability checks and greedy keypoint placement.
//!
//! Keypoints are time indices whose states are kept in the sliding window.
//! The selector grows a seed of the four most recent indices one element at
//! a time, choosing the candidate that minimizes the squared GDOP of the
//! line-of-sight directions plus a penalty on the window's time span. The
//! inverse Gram matrix is carried through rank-one Woodbury updates so each
//! candidate evaluation costs a handful of 3×3 operations.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix3};
use thiserror::Error;

use crate::geometry::Vec3;

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Tikhonov term seeding the inverse Gram before three independent
/// directions exist.
pub const GRAM_REGULARIZATION: f64 = 1e-9;
/// Candidates older than this (relative to the newest index) are ignored, s.
pub const DEFAULT_HISTORY_HORIZON: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum KeypointError {
    #[error("direction must be finite and non-zero")]
    ZeroDirection,
    #[error("rank-one update denominator {0} is not positive; rebuild the accumulator")]
    InvalidUpdate(f64),
    #[error("keypoint selection needs k >= 3 and K >= 4 (got k = {k}, K = {window})")]
    InvalidArguments { k: usize, window: usize },
    #[error("no line-of-sight history for index {0}")]
    MissingHistory(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointCandidate {
    pub index: usize,
    pub timestamp: f64,
    direction: Vec3,
}

impl KeypointCandidate {
    /// Builds a candidate from a relative position estimate (normalized here).
    pub fn new(index: usize, timestamp: f64, position: &Vec3) -> Result<Self, KeypointError> {
        let n = position.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(KeypointError::ZeroDirection);
        }
        Ok(Self { index, timestamp, direction: position / n })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }
}

/// The 6×K matrix with columns `[ρ_j; (t_j - t_0) ρ_j]`, `t_0` taken from the
/// first candidate.
pub fn observability_matrix(candidates: &[KeypointCandidate]) -> DMatrix<f64> {
    let mut o = DMatrix::zeros(6, candidates.len());
    let Some(first) = candidates.first() else {
        return o;
    };
    for (j, c) in candidates.iter().enumerate() {
        let dt = c.timestamp - first.timestamp;
        o.fixed_view_mut::<3, 1>(0, j).copy_from(&c.direction);
        o.fixed_view_mut::<3, 1>(3, j).copy_from(&(c.direction * dt));
    }
    o
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observability {
    Observable,
    Deficient(usize),
}

impl std::fmt::Display for Observability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observability::Observable => write!(f, "observable"),
            Observability::Deficient(rank) => write!(f, "deficient({rank})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservabilityReport {
    pub verdict: Observability,
    pub rank: usize,
    /// Singular values of the observability matrix, descending.
    pub singular_values: Vec<f64>,
}

pub fn check_observability(candidates: &[KeypointCandidate]) -> ObservabilityReport {
    let o = observability_matrix(candidates);
    let mut singular_values: Vec<f64> = if candidates.is_empty() {
        Vec::new()
    } else {
        o.singular_values().iter().copied().collect()
    };
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let max = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values.iter().filter(|&&s| max > 0.0 && s > RANK_TOLERANCE * max).count();
    let verdict = if rank == 6 { Observability::Observable } else { Observability::Deficient(rank) };
    ObservabilityReport { verdict, rank, singular_values }
}

/// Squared GDOP of the set's directions plus `gamma` times its time span.
///
/// Returns `f64::INFINITY` when the Gram matrix is singular.
pub fn gdop_cost(keypoints: &[KeypointCandidate], gamma: f64) -> f64 {
    let gram: Matrix3<f64> = keypoints.iter().map(|c| c.direction * c.direction.transpose()).sum();
    let eig = gram.symmetric_eigenvalues();
    if !(eig.min() > 1e-12 * eig.max().max(f64::MIN_POSITIVE)) {
        return f64::INFINITY;
    }
    let Some(inv) = gram.cholesky().map(|c| c.inverse()) else {
        return f64::INFINITY;
    };
    inv.trace() + gamma * time_span(keypoints.iter().map(|c| c.timestamp))
}

/// Sum of successive gaps of the sorted timestamps.
fn time_span(times: impl Iterator<Item = f64>) -> f64 {
    let mut t: Vec<f64> = times.collect();
    t.sort_by(f64::total_cmp);
    t.windows(2).map(|w| w[1] - w[0]).sum()
}

/// Running inverse Gram matrix `Λ = (D^T D)^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdopAccumulator {
    pub inverse_gram: Matrix3<f64>,
    pub count: usize,
}

impl GdopAccumulator {
    /// `Λ = (ε I)^{-1}`, so that the first updates are defined.
    pub fn regularized(epsilon: f64) -> Self {
        Self { inverse_gram: Matrix3::identity() / epsilon, count: 0 }
    }

    /// `Λ = (ε I + Σ ρ ρ^T)^{-1}` computed directly.
    pub fn from_directions<'a>(directions: impl IntoIterator<Item = &'a Vec3>, epsilon: f64) -> Self {
        let mut count = 0;
        let mut gram = Matrix3::identity() * epsilon;
        for d in directions {
            gram += d * d.transpose();
            count += 1;
        }
        let inverse_gram = gram
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| Matrix3::identity() / epsilon);
        Self { inverse_gram, count }
    }

    pub fn trace(&self) -> f64 {
        self.inverse_gram.trace()
    }

    /// `tr(Λ')` after absorbing `direction`, without forming `Λ'`.
    pub fn trace_with(&self, direction: &Vec3) -> f64 {
        let l_rho = self.inverse_gram * direction;
        self.trace() - l_rho.norm_squared() / (1.0 + direction.dot(&l_rho))
    }
}

/// Rank-one Woodbury update `Λ ← Λ - Λρρ^TΛ / (1 + ρ^TΛρ)`.
pub fn gdop_update(acc: &GdopAccumulator, direction: &Vec3) -> Result<GdopAccumulator, KeypointError> {
    let l_rho = acc.inverse_gram * direction;
    let denom = 1.0 + direction.dot(&l_rho);
    if !(denom > 1e-12) {
        return Err(KeypointError::InvalidUpdate(denom));
    }
    let updated = acc.inverse_gram - l_rho * l_rho.transpose() / denom;
    Ok(GdopAccumulator { inverse_gram: (updated + updated.transpose()) * 0.5, count: acc.count + 1 })
}

/// Line-of-sight history indexed by contiguous time index.
#[derive(Clone, Copy, Debug)]
pub struct History<'a> {
    entries: &'a [KeypointCandidate],
}

impl<'a> History<'a> {
    /// `entries[i].index` must equal `entries[0].index + i`.
    pub fn new(entries: &'a [KeypointCandidate]) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[1].index == w[0].index + 1));
        Self { entries }
    }

    pub fn get(&self, index: usize) -> Option<&'a KeypointCandidate> {
        let first = self.entries.first()?.index;
        self.entries.get(index.checked_sub(first)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSelection {
    /// Selected indices, ascending.
    pub keypoints: Vec<usize>,
    /// Set when there were too few candidates to fill the window.
    pub short: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionParams {
    pub window_size: usize,
    pub gamma: f64,
    pub horizon: f64,
}

/// Greedy keypoint selection at time index `k`.
///
/// Seeds with `{k-3, …, k}`, takes candidates from the previous set plus any
/// indices between its newest element and `k-4`, and adds `K - 4` of them one
/// at a time. Ties go to the most recent index.
pub fn select_keypoints(
    k: usize,
    params: &SelectionParams,
    previous: &[usize],
    history: &History<'_>,
) -> Result<KeypointSelection, KeypointError> {
    let window = params.window_size;
    if k < 3 || window < 4 {
        return Err(KeypointError::InvalidArguments { k, window });
    }
    let lookup = |i: usize| history.get(i).ok_or(KeypointError::MissingHistory(i));
    let seeds: Vec<usize> = (k - 3..=k).collect();
    let newest_time = lookup(k)?.timestamp;

    let fresh_start = previous.iter().max().map_or(0, |m| m + 1);
    let mut candidates: BTreeSet<usize> = previous.iter().copied().chain(fresh_start..k.saturating_sub(3)).collect();
    for s in &seeds {
        candidates.remove(s);
    }
    candidates.retain(|&p| p < k && history.get(p).is_some_and(|c| newest_time - c.timestamp <= params.horizon));

    let mut chosen: BTreeSet<usize> = seeds.iter().copied().collect();
    let rounds = window - 4;
    if candidates.len() < rounds {
        chosen.extend(candidates);
        return Ok(KeypointSelection { keypoints: chosen.into_iter().collect(), short: true });
    }

    let seed_dirs: Vec<Vec3> = seeds.iter().map(|&i| lookup(i).map(|c| c.direction)).collect::<Result<_, _>>()?;
    let mut acc = GdopAccumulator::from_directions(&seed_dirs, GRAM_REGULARIZATION);
    let mut oldest_time = lookup(k - 3)?.timestamp;

    for _ in 0..rounds {
        let mut best: Option<(usize, f64)> = None;
        for &p in &candidates {
            let c = lookup(p)?;
            let span = newest_time - oldest_time.min(c.timestamp);
            let cost = acc.trace_with(&c.direction) + params.gamma * span;
            if best.is_none_or(|(_, j)| cost <= j) {
                best = Some((p, cost));
            }
        }
        let Some((p, _)) = best else { break };
        let c = lookup(p)?;
        acc = match gdop_update(&acc, &c.direction) {
            Ok(a) => a,
            Err(_) => {
                let dirs: Vec<Vec3> = chosen
                    .iter()
                    .chain(std::iter::once(&p))
                    .map(|&i| lookup(i).map(|c| c.direction))
                    .collect::<Result<_, _>>()?;
                GdopAccumulator::from_directions(&dirs, GRAM_REGULARIZATION)
            }
        };
        oldest_time = oldest_time.min(c.timestamp);
        chosen.insert(p);
        candidates.remove(&p);
    }
    Ok(KeypointSelection { keypoints: chosen.into_iter().collect(), short: false })
}

/// The `K` most recent indices ending at `k`.
pub fn most_recent_keypoints(k: usize, window_size: usize) -> Vec<usize> {
    (k.saturating_sub(window_size.saturating_sub(1))..=k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(index: usize, t: f64, d: Vec3) -> KeypointCandidate {
        KeypointCandidate::new(index, t, &d).unwrap()
    }

    fn random_dir(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 {
                return v.normalize();
            }
        }
    }

    fn two_triads() -> Vec<KeypointCandidate> {
        let dirs = [
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
        ];
        dirs.iter().enumerate().map(|(i, d)| cand(i, i as f64 * 0.1, *d)).collect()
    }

    #[test]
    fn single_column_has_zero_lower_block() {
        let o = observability_matrix(&[cand(3, 1.0, Vec3::new(0.0, 3.0, 4.0))]);
        assert_eq!(o.shape(), (6, 1));
        assert_relative_eq!(o[(1, 0)], 0.6);
        assert_relative_eq!(o[(2, 0)], 0.8);
        assert_eq!(o.rows(3, 3).norm(), 0.0);
    }

    #[test]
    fn two_triads_are_observable() {
        let report = check_observability(&two_triads());
        assert_eq!(report.verdict, Observability::Observable);
        let s = &report.singular_values;
        assert!(s[5] / s[0] > 1e-8);
    }

    #[test]
    fn equal_timestamps_are_deficient() {
        let cands: Vec<_> = two_triads().into_iter().map(|c| KeypointCandidate { timestamp: 2.0, ..c }).collect();
        let report = check_observability(&cands);
        assert!(report.rank <= 3);
        assert!(matches!(report.verdict, Observability::Deficient(_)));
    }

    #[test]
    fn five_keypoints_are_deficient() {
        let report = check_observability(&two_triads()[..5]);
        assert!(report.rank <= 5);
        assert_eq!(report.verdict, Observability::Deficient(report.rank));
    }

    #[test]
    fn planar_directions_cap_rank_at_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cands: Vec<_> = (0..12)
            .map(|i| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                cand(i, i as f64 * 0.37, Vec3::new(a.cos(), a.sin(), 0.0))
            })
            .collect();
        let report = check_observability(&cands);
        assert_eq!(report.verdict, Observability::Deficient(4));
        assert_eq!(report.verdict.to_string(), "deficient(4)");
    }

    #[test]
    fn gdop_cost_examples() {
        let axes: Vec<_> = [Vec3::x(), Vec3::y(), Vec3::z()].iter().map(|d| cand(0, 5.0, *d)).collect();
        assert_relative_eq!(gdop_cost(&axes, 0.0), 3.0, epsilon = 1e-12);
        let spread: Vec<_> = axes.iter().zip([0.0, 0.1, 0.3]).map(|(c, t)| KeypointCandidate { timestamp: t, ..*c }).collect();
        assert_relative_eq!(gdop_cost(&spread, 100.0), 33.0, epsilon = 1e-12);
        let collinear = vec![cand(0, 0.0, Vec3::x()), cand(1, 1.0, -Vec3::x()), cand(2, 2.0, Vec3::x())];
        assert_eq!(gdop_cost(&collinear, 1.0), f64::INFINITY);
    }

    #[test]
    fn gdop_cost_matches_dense_inverse_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cands: Vec<_> = (0..8).map(|i| cand(i, rng.random_range(0.0..4.0), random_dir(&mut rng))).collect();
        let mut d = DMatrix::zeros(8, 3);
        for (i, c) in cands.iter().enumerate() {
            d.row_mut(i).copy_from(&c.direction().transpose());
        }
        let dense = (d.transpose() * &d).try_inverse().unwrap().trace();
        let tmin = cands.iter().map(|c| c.timestamp).fold(f64::INFINITY, f64::min);
        let tmax = cands.iter().map(|c| c.timestamp).fold(f64::NEG_INFINITY, f64::max);
        let cost = gdop_cost(&cands, 2.5);
        assert!((cost - (dense + 2.5 * (tmax - tmin))).abs() < 1e-9);
        cands.reverse();
        assert!((gdop_cost(&cands, 2.5) - cost).abs() < 1e-12);
    }

    #[test]
    fn woodbury_examples() {
        let acc = GdopAccumulator { inverse_gram: Matrix3::identity(), count: 0 };
        let up = gdop_update(&acc, &Vec3::x()).unwrap();
        assert_eq!(up.inverse_gram, Matrix3::from_diagonal(&Vec3::new(0.5, 1.0, 1.0)));
        assert_eq!(up.count, 1);
        let odd = GdopAccumulator { inverse_gram: Matrix3::new(2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 4.0), count: 5 };
        assert_eq!(gdop_update(&odd, &Vec3::zeros()).unwrap().inverse_gram, odd.inverse_gram);
        let bad = GdopAccumulator { inverse_gram: -Matrix3::identity() * 2.0, count: 0 };
        assert!(matches!(gdop_update(&bad, &Vec3::x()), Err(KeypointError::InvalidUpdate(_))));
    }

    #[test]
    fn woodbury_chain_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dirs: Vec<Vec3> = (0..20).map(|_| random_dir(&mut rng)).collect();
        let mut acc = GdopAccumulator::from_directions(&dirs[..3], 0.0);
        for d in &dirs[3..] {
            acc = gdop_update(&acc, d).unwrap();
        }
        let gram: Matrix3<f64> = dirs.iter().map(|d| d * d.transpose()).sum();
        assert!((acc.inverse_gram - gram.try_inverse().unwrap()).amax() < 1e-9);
        let probe = random_dir(&mut rng);
        let direct = gdop_update(&acc, &probe).unwrap().trace();
        assert_relative_eq!(acc.trace_with(&probe), direct, epsilon = 1e-12);
    }

    fn history_from(dirs: &[Vec3], dt: f64) -> Vec<KeypointCandidate> {
        dirs.iter().enumerate().map(|(i, d)| cand(i, i as f64 * dt, *d)).collect()
    }

    fn rotating_history(n: usize) -> Vec<KeypointCandidate> {
        let dirs: Vec<Vec3> = (0..n)
            .map(|i| {
                let a = i as f64 * 0.05;
                Vec3::new(a.cos(), a.sin(), 0.4 * (0.3 * a).sin() + 0.2)
            })
            .collect();
        history_from(&dirs, 0.1)
    }

    #[test]
    fn window_of_four_is_the_seed() {
        let h = rotating_history(50);
        let params = SelectionParams { window_size: 4, gamma: 0.0, horizon: 60.0 };
        let prev: Vec<usize> = (45..49).collect();
        let sel = select_keypoints(49, &params, &prev, &History::new(&h)).unwrap();
        assert_eq!(sel.keypoints, vec![46, 47, 48, 49]);
        assert!(!sel.short);
    }

    #[test]
    fn huge_gamma_recovers_most_recent() {
        let h = rotating_history(200);
        let params = SelectionParams { window_size: 20, gamma: 1e9, horizon: 60.0 };
        let mut prev: Vec<usize> = (0..20).collect();
        for k in 20..200 {
            let sel = select_keypoints(k, &params, &prev, &History::new(&h)).unwrap();
            assert_eq!(sel.keypoints, most_recent_keypoints(k, 20));
            prev = sel.keypoints;
        }
    }

    #[test]
    fn zero_gamma_picks_the_orthogonal_outlier_first() {
        // Planar history except one distant index looking along z.
        let mut dirs: Vec<Vec3> = (0..40).map(|i| Vec3::new((0.3 * i as f64).cos(), (0.3 * i as f64).sin(), 0.0)).collect();
        dirs[5] = Vec3::z();
        let h = history_from(&dirs, 0.1);
        let params = SelectionParams { window_size: 5, gamma: 0.0, horizon: 60.0 };
        let prev: Vec<usize> = (0..39).collect();
        let sel = select_keypoints(39, &params, &prev, &History::new(&h)).unwrap();

        // Exhaustive oracle over every candidate for the single greedy round.
        let seed: Vec<_> = (36..40).map(|i| h[i]).collect();
        let best = (0..36)
            .map(|p| {
                let mut set = seed.clone();
                set.push(h[p]);
                (p, gdop_cost(&set, 0.0))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(best.0, 5);
        assert_eq!(sel.keypoints, vec![5, 36, 37, 38, 39]);
    }

    #[test]
    fn short_history_is_flagged() {
        let h = rotating_history(10);
        let params = SelectionParams { window_size: 20, gamma: 1.0, horizon: 60.0 };
        let prev: Vec<usize> = (0..9).collect();
        let sel = select_keypoints(9, &params, &prev, &History::new(&h)).unwrap();
        assert!(sel.short);
        assert_eq!(sel.keypoints, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_arguments() {
        let h = rotating_history(10);
        let p = SelectionParams { window_size: 20, gamma: 1.0, horizon: 60.0 };
        assert!(select_keypoints(2, &p, &[], &History::new(&h)).is_err());
        let p = SelectionParams { window_size: 3, ..p };
        assert!(select_keypoints(5, &p, &[], &History::new(&h)).is_err());
    }

    #[test]
    fn horizon_excludes_stale_candidates() {
        let h = rotating_history(100);
        let params = SelectionParams { window_size: 8, gamma: 0.0, horizon: 2.0 };
        let prev: Vec<usize> = (0..99).collect();
        let sel = select_keypoints(99, &params, &prev, &History::new(&h)).unwrap();
        assert!(sel.keypoints.iter().all(|&p| 9.9 - h[p].timestamp <= 2.0));
    }
}

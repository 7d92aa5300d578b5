//! Test oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{Matrix6, RowVector6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relpos::dynamics::{preintegrate, DynamicsError, PreintegratedFactor, RelativeInput};
use relpos::geometry::Vec3;
use relpos::swf::{KeypointPolicy, Prior, ScalarMeasurement, SlidingWindowFilter, SwfConfig};

/// `y = a · r + v` for a fixed unit vector `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearMeasurement {
    pub timestamp: f64,
    pub axis: Vec3,
    pub value: f64,
    pub variance: f64,
}

impl ScalarMeasurement for LinearMeasurement {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn variance(&self) -> f64 {
        self.variance
    }

    fn predict(&self, x: &Vector6<f64>) -> Result<(f64, RowVector6<f64>), DynamicsError> {
        let mut jac = RowVector6::zeros();
        jac.fixed_columns_mut::<3>(0).copy_from(&self.axis.transpose());
        Ok((self.axis.dot(&x.fixed_rows::<3>(0)), jac))
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

pub fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| normal(rng));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

/// A random linear problem: prior, chained factors and one measurement per
/// index, generated from a sampled true trajectory.
pub struct LinearProblem {
    pub prior_mean: Vector6<f64>,
    pub prior_cov: Matrix6<f64>,
    pub factors: Vec<PreintegratedFactor>,
    pub measurements: Vec<LinearMeasurement>,
}

pub fn linear_problem(rng: &mut ChaCha8Rng, epochs: usize) -> LinearProblem {
    let mut prior_cov = Matrix6::<f64>::zeros();
    for i in 0..3 {
        prior_cov[(i, i)] = 0.5;
        prior_cov[(i + 3, i + 3)] = 0.05;
    }
    let x0 = Vector6::from_fn(|i, _| if i < 3 { 3.0 * normal(rng) } else { normal(rng) });
    let prior_mean = x0 + Vector6::from_fn(|i, _| prior_cov[(i, i)].sqrt() * normal(rng));
    let mut t = 0.0;
    let mut factors = Vec::new();
    let mut measurements = Vec::new();
    let mut x = x0;
    for k in 0..epochs {
        if k > 0 {
            let steps = rng.random_range(2..=8);
            let mut inputs = Vec::new();
            let start = t;
            for _ in 0..steps {
                inputs.push(RelativeInput {
                    timestamp: t,
                    mean: Vec3::from_fn(|_, _| normal(rng)),
                    covariance: nalgebra::Matrix3::identity(),
                });
                t += rng.random_range(0.05..0.1);
            }
            let f = preintegrate(&inputs, t, k - 1, k).expect("valid inputs");
            assert!(f.from_time == start);
            factors.push(f);
            x = f.apply(&x);
        }
        let axis = unit(rng);
        let variance: f64 = 0.01;
        let value = axis.dot(&x.fixed_rows::<3>(0)) + variance.sqrt() * normal(rng);
        measurements.push(LinearMeasurement { timestamp: t, axis, value, variance });
    }
    LinearProblem { prior_mean, prior_cov, factors, measurements }
}

fn info(m: &Matrix6<f64>) -> Matrix6<f64> {
    let i = m.cholesky().expect("positive definite").inverse();
    (i + i.transpose()) * 0.5
}

/// Full-batch Gauss-Newton over indices `0..=last` of a chain, solved with a
/// block-tridiagonal elimination. Returns the state and marginal covariance
/// of every index. `use_measurement(i)` masks measurements.
pub fn batch_solve<M: ScalarMeasurement>(
    prior_mean: &Vector6<f64>,
    prior_cov: &Matrix6<f64>,
    factors: &[PreintegratedFactor],
    measurements: &[M],
    last: usize,
    use_measurement: impl Fn(usize) -> bool,
    initial: &[Vector6<f64>],
) -> Vec<(Vector6<f64>, Matrix6<f64>)> {
    let n = last + 1;
    let prior_info = info(prior_cov);
    let q_info: Vec<Matrix6<f64>> = factors[..last].iter().map(|f| info(&f.noise)).collect();
    let mut x: Vec<Vector6<f64>> = initial[..n].to_vec();

    let cost = |x: &[Vector6<f64>]| -> f64 {
        let e0 = x[0] - prior_mean;
        let mut c = (e0.transpose() * prior_info * e0)[0];
        for i in 0..last {
            let e = x[i + 1] - factors[i].apply(&x[i]);
            c += (e.transpose() * q_info[i] * e)[0];
        }
        for (i, xi) in x.iter().enumerate() {
            if use_measurement(i) {
                let z = &measurements[i];
                let r = z.value() - z.predict(xi).unwrap().0;
                c += r * r / z.variance();
            }
        }
        c
    };

    let mut covs = vec![Matrix6::zeros(); n];
    for iter in 0..100 {
        // Normal equations: diagonal blocks d, super-diagonal blocks o, and
        // the gradient g of half the cost.
        let mut d = vec![Matrix6::zeros(); n];
        let mut o = vec![Matrix6::zeros(); n.saturating_sub(1)];
        let mut g = vec![Vector6::zeros(); n];
        d[0] += prior_info;
        g[0] += prior_info * (x[0] - prior_mean);
        for i in 0..last {
            let a = factors[i].transition;
            let w = q_info[i];
            let e = x[i + 1] - factors[i].apply(&x[i]);
            d[i] += a.transpose() * w * a;
            d[i + 1] += w;
            o[i] += -(a.transpose() * w);
            g[i] += -(a.transpose() * w * e);
            g[i + 1] += w * e;
        }
        for i in 0..n {
            if use_measurement(i) {
                let z = &measurements[i];
                let (h, jac) = z.predict(&x[i]).unwrap();
                let r = z.value() - h;
                d[i] += jac.transpose() * jac / z.variance();
                g[i] += -(jac.transpose() * r / z.variance());
            }
        }

        // Forward elimination: s_i = d_i - o_{i-1}^T s_{i-1}^{-1} o_{i-1}.
        let mut s_inv = vec![Matrix6::zeros(); n];
        let mut rhs = vec![Vector6::zeros(); n];
        for i in 0..n {
            let mut s = d[i];
            let mut r = -g[i];
            if i > 0 {
                s -= o[i - 1].transpose() * s_inv[i - 1] * o[i - 1];
                r -= o[i - 1].transpose() * s_inv[i - 1] * rhs[i - 1];
            }
            s_inv[i] = info(&((s + s.transpose()) * 0.5));
            rhs[i] = r;
        }
        let mut step = vec![Vector6::zeros(); n];
        step[n - 1] = s_inv[n - 1] * rhs[n - 1];
        covs[n - 1] = s_inv[n - 1];
        for i in (0..n - 1).rev() {
            step[i] = s_inv[i] * (rhs[i] - o[i] * step[i + 1]);
            let gain = s_inv[i] * o[i];
            let c = s_inv[i] + gain * covs[i + 1] * gain.transpose();
            covs[i] = (c + c.transpose()) * 0.5;
        }

        let norm = step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
        // Slack for rounding so that converged iterations still refine.
        let before = cost(&x) * (1.0 + 1e-12);
        let mut scale = 1.0;
        let mut next: Vec<Vector6<f64>> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
        while cost(&next) > before && scale > 1e-4 {
            scale *= 0.5;
            next = x.iter().zip(&step).map(|(a, b)| a + b * scale).collect();
        }
        if cost(&next) > before {
            break;
        }
        x = next;
        if norm * scale < 1e-13 || iter == 99 {
            break;
        }
    }
    x.into_iter().zip(covs).collect()
}

/// Initial guess for a batch: the prior mean propagated through the factors.
pub fn dead_reckoning(prior_mean: &Vector6<f64>, factors: &[PreintegratedFactor]) -> Vec<Vector6<f64>> {
    let mut out = vec![*prior_mean];
    for f in factors {
        let next = f.apply(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Largest deviation between each solved window and a batch over every
/// measurement the window has used, directly or through its prior. State
/// errors are absolute; covariance errors are relative to the largest entry
/// of the batch covariance when that exceeds one.
pub fn worst_deviation(policy: KeypointPolicy, seed: u64, problems: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..problems {
        let epochs = rng.random_range(15..40);
        let window_size = rng.random_range(5..=10);
        let p = linear_problem(&mut rng, epochs);
        let prior = Prior::new(p.prior_mean, p.prior_cov, 0).unwrap();
        let config = SwfConfig { window_size, policy, ..SwfConfig::default() };
        let mut filter: SlidingWindowFilter<LinearMeasurement> = SlidingWindowFilter::new(config, prior).unwrap();
        let mut absorbed = BTreeSet::new();
        let seeds = dead_reckoning(&p.prior_mean, &p.factors);
        for k in 0..epochs {
            let old: Vec<usize> = filter.window().map(|w| w.keypoints().to_vec()).unwrap_or_default();
            filter.step(k.checked_sub(1).map(|i| p.factors[i]), p.measurements[k]).unwrap();
            let dump = filter.dump().unwrap();
            absorbed.extend(old.into_iter().filter(|&i| i < dump.keypoints[0]));
            let used: BTreeSet<usize> = absorbed.iter().chain(&dump.keypoints).copied().collect();
            let batch = batch_solve(&p.prior_mean, &p.prior_cov, &p.factors, &p.measurements, k, |i| used.contains(&i), &seeds);
            for (n, &i) in dump.keypoints.iter().enumerate() {
                let (xb, pb) = &batch[i];
                let scale = pb.amax().max(1.0);
                for r in 0..6 {
                    worst = worst.max((dump.states[n][r] - xb[r]).abs());
                    for c in 0..6 {
                        worst = worst.max((dump.covariances[n][r][c] - pb[(r, c)]).abs() / scale);
                    }
                }
            }
        }
    }
    worst
}

use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ahrs::ResolvedAcceleration;
use crate::dynamics::AgentContribution;

/// Payload bytes: two indices, two times, 6 offset, 21 noise, 6 covariance.
pub const PAYLOAD_BYTES: usize = 8 * (2 + 2 + 6 + 21 + 6);

/// One agent's pre-integrated share of an inter-epoch factor, as exchanged
/// between agents at the estimator rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub from_index: u64,
    pub to_index: u64,
    pub from_time: f64,
    pub to_time: f64,
    pub offset: [f64; 6],
    /// Upper triangle of the 6×6 accumulated noise, row-major.
    pub noise_upper: [f64; 21],
    /// Upper triangle of the latest resolved-acceleration covariance.
    pub latest_covariance: [f64; 6],
}

fn upper<const N: usize, const L: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> [f64; L] {
    let mut out = [0.0; L];
    let mut k = 0;
    for r in 0..N {
        for c in r..N {
            out[k] = m[(r, c)];
            k += 1;
        }
    }
    out
}

fn from_upper<const N: usize>(v: &[f64]) -> nalgebra::SMatrix<f64, N, N> {
    let mut m = nalgebra::SMatrix::<f64, N, N>::zeros();
    let mut k = 0;
    for r in 0..N {
        for c in r..N {
            m[(r, c)] = v[k];
            m[(c, r)] = v[k];
            k += 1;
        }
    }
    m
}

fn is_psd(n: usize, column_major: &[f64]) -> bool {
    let m = nalgebra::DMatrix::from_column_slice(n, n, column_major);
    let scale = m.amax().max(f64::MIN_POSITIVE);
    m.iter().all(|v| v.is_finite()) && m.symmetric_eigenvalues().min() >= -1e-12 * scale
}

impl AgentMessage {
    pub fn new(from_index: u64, to_index: u64, contribution: &AgentContribution, latest: &ResolvedAcceleration) -> Self {
        Self {
            from_index,
            to_index,
            from_time: contribution.from_time,
            to_time: contribution.to_time,
            offset: contribution.offset.into(),
            noise_upper: upper::<6, 21>(&contribution.noise),
            latest_covariance: upper::<3, 6>(&latest.covariance),
        }
    }

    pub fn noise(&self) -> Matrix6<f64> {
        from_upper::<6>(&self.noise_upper)
    }

    pub fn latest_covariance(&self) -> Matrix3<f64> {
        from_upper::<3>(&self.latest_covariance)
    }

    /// Rebuilds the contribution; the transition depends only on the shared
    /// sample times, so the receiver supplies its own copy.
    pub fn to_contribution(&self, transition: &Matrix6<f64>) -> AgentContribution {
        AgentContribution {
            from_time: self.from_time,
            to_time: self.to_time,
            transition: *transition,
            offset: Vector6::from(self.offset),
            noise: self.noise(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.to_time > self.from_time) || self.to_index <= self.from_index {
            return Err(SimError::Message("degenerate epoch interval".into()));
        }
        if !self.offset.iter().all(|v| v.is_finite()) {
            return Err(SimError::Message("non-finite offset".into()));
        }
        if !is_psd(6, self.noise().as_slice()) || !is_psd(3, self.latest_covariance().as_slice()) {
            return Err(SimError::Message("covariance is not positive semidefinite".into()));
        }
        Ok(())
    }

    /// Little-endian record preceded by its `u32` byte length.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + PAYLOAD_BYTES);
        out.extend_from_slice(&(PAYLOAD_BYTES as u32).to_le_bytes());
        out.extend_from_slice(&self.from_index.to_le_bytes());
        out.extend_from_slice(&self.to_index.to_le_bytes());
        let floats = [self.from_time, self.to_time]
            .into_iter()
            .chain(self.offset)
            .chain(self.noise_upper)
            .chain(self.latest_covariance);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SimError> {
        let (prefix, body) = bytes
            .split_first_chunk::<4>()
            .ok_or_else(|| SimError::Message("missing length prefix".into()))?;
        let len = u32::from_le_bytes(*prefix) as usize;
        if len != PAYLOAD_BYTES || body.len() != len {
            return Err(SimError::Message(format!("expected {PAYLOAD_BYTES} payload bytes, got {}", body.len())));
        }
        let words: Vec<[u8; 8]> = body.chunks_exact(8).map(|c| c.try_into().expect("8-byte chunk")).collect();
        let f = |i: usize| f64::from_le_bytes(words[i]);
        let msg = Self {
            from_index: u64::from_le_bytes(words[0]),
            to_index: u64::from_le_bytes(words[1]),
            from_time: f(2),
            to_time: f(3),
            offset: std::array::from_fn(|i| f(4 + i)),
            noise_upper: std::array::from_fn(|i| f(10 + i)),
            latest_covariance: std::array::from_fn(|i| f(31 + i)),
        };
        msg.validate()?;
        Ok(msg)
    }
}

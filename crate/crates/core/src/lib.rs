//! Relative position estimation between two agents that each carry a 9-DOF
//! IMU and share a single range measurement.

// Guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ahrs;
pub mod baselines;
pub mod dynamics;
pub mod geometry;
pub mod keypoints;
pub mod sim;
pub mod swf;

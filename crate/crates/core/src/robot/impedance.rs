//! Cartesian impedance control law.
//!
//! `tau = J^T (F_d + K_m e + D e_dot + M e_ddot)` with diagonal gain
//! matrices. Six-vectors are ordered `[x, y, z, rx, ry, rz]`.

use serde::{Deserialize, Serialize};

use super::kinematics::Jacobian;
use super::RobotError;
use crate::spatial::Pose;

/// Index of the compliant (force-controlled) axis in a six-vector.
pub const AXIAL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceGains {
    /// Diagonal of K_m (N/m translational, N·m/rad rotational).
    pub stiffness: [f64; 6],
    /// Diagonal of D.
    pub damping: [f64; 6],
    /// Diagonal of M.
    pub inertia: [f64; 6],
    /// Desired wrench F_d in the base frame (N, N·m).
    pub desired_wrench: [f64; 6],
}

impl Default for ImpedanceGains {
    /// 8 N pressing down along the probe centerline with 500 N/m axial
    /// stiffness. Axial damping of 450 N·s/m is close to critical for a 1 kg
    /// virtual mass on 500 + 50 000 N/m. The lateral and rotational gains only
    /// feed the logged torques since those axes are position controlled.
    fn default() -> Self {
        ImpedanceGains {
            stiffness: [2000.0, 2000.0, 500.0, 150.0, 150.0, 150.0],
            damping: [90.0, 90.0, 450.0, 10.0, 10.0, 10.0],
            inertia: [0.0; 6],
            desired_wrench: [0.0, 0.0, -8.0, 0.0, 0.0, 0.0],
        }
    }
}

impl ImpedanceGains {
    pub fn validate(&self) -> Result<(), RobotError> {
        let all = self
            .stiffness
            .iter()
            .chain(&self.damping)
            .chain(&self.inertia);
        if !all.clone().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(RobotError::InvalidGains(
                "diagonal entries must be finite and >= 0".into(),
            ));
        }
        if self
            .stiffness
            .iter()
            .chain(&self.damping)
            .all(|v| *v == 0.0)
        {
            return Err(RobotError::InvalidGains(
                "stiffness and damping are both zero".into(),
            ));
        }
        if !self.desired_wrench.iter().all(|v| v.is_finite()) {
            return Err(RobotError::InvalidGains(
                "desired wrench must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Magnitude of the desired pressing force along the probe centerline
    /// (pointing down, into the tissue).
    pub fn axial_force(&self) -> f64 {
        -self.desired_wrench[AXIAL]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseError {
    pub e: [f64; 6],
    pub edot: [f64; 6],
    pub eddot: [f64; 6],
}

impl PoseError {
    /// Target minus current, with the orientation part as the rotation
    /// vector of `target * current^-1` (base frame). Rates are zero.
    pub fn between(current: &Pose, target: &Pose) -> PoseError {
        let dp = target.position - current.position;
        let dr = target
            .orientation
            .compose_raw(current.orientation.inverse())
            .to_rotation_vector();
        PoseError {
            e: [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z],
            ..Default::default()
        }
    }
}

/// Cartesian wrench commanded by the impedance law (base frame).
pub fn impedance_wrench(gains: &ImpedanceGains, err: &PoseError) -> [f64; 6] {
    std::array::from_fn(|i| {
        gains.desired_wrench[i]
            + gains.stiffness[i] * err.e[i]
            + gains.damping[i] * err.edot[i]
            + gains.inertia[i] * err.eddot[i]
    })
}

/// Joint torques `J^T (F_d + K_m e + D e_dot + M e_ddot)`.
pub fn impedance_torque(j: &Jacobian, gains: &ImpedanceGains, err: &PoseError) -> Vec<f64> {
    j.transpose_mul(&impedance_wrench(gains, err))
}

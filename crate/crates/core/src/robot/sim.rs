//! Time-stepped scan simulation.
//!
//! Five degrees of freedom (lateral position and orientation) follow the scan
//! path exactly. The vertical axis is force controlled: a virtual mass driven
//! by the impedance wrench and the tissue reaction, integrated with
//! semi-implicit Euler. Joint torques are evaluated on a Cartesian gantry
//! chain every step for logging.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::impedance::{impedance_torque, impedance_wrench, ImpedanceGains, PoseError, AXIAL};
use super::kinematics::{geometric_jacobian, JointState, KinematicChain};
use super::RobotError;
use crate::spatial::{Pose, Rotation, Vec3};

pub const MAX_TIMESTEP: f64 = 0.01;

/// Flat spring-damper tissue patch below the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub surface_height: f64,
    /// N/m.
    pub stiffness: f64,
    /// N·s/m, only resists motion into the tissue.
    pub damping: f64,
}

impl Default for TissueModel {
    fn default() -> Self {
        TissueModel {
            surface_height: 0.0,
            stiffness: 50_000.0,
            damping: 10.0,
        }
    }
}

impl TissueModel {
    pub fn validate(&self) -> Result<(), RobotError> {
        if !(self.stiffness.is_finite() && self.stiffness > 0.0) {
            return Err(RobotError::InvalidTissue("stiffness must be > 0".into()));
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) || !self.surface_height.is_finite() {
            return Err(RobotError::InvalidTissue("damping must be >= 0".into()));
        }
        Ok(())
    }

    pub fn penetration(&self, probe_z: f64) -> f64 {
        (self.surface_height - probe_z).max(0.0)
    }
}

/// Reaction force of the tissue on the probe (N, pushing up).
pub fn contact_force(tissue: &TissueModel, probe_z: f64, probe_zdot: f64) -> f64 {
    let delta = tissue.penetration(probe_z);
    if delta <= 0.0 {
        return 0.0;
    }
    tissue.stiffness * delta + tissue.damping * (-probe_zdot).max(0.0)
}

/// Static balance of the axial controller against the tissue spring:
/// returns `(penetration, contact force)`.
pub fn equilibrium_contact_force(
    desired_force: f64,
    controller_stiffness: f64,
    tissue_stiffness: f64,
) -> Result<(f64, f64), RobotError> {
    let total = controller_stiffness + tissue_stiffness;
    if !(total > 0.0) {
        return Err(RobotError::NonpositiveStiffness(total));
    }
    let delta = desired_force / total;
    // written as a ratio so that K_m = 0 returns F_d bit-exactly
    let force = desired_force * (tissue_stiffness / total);
    Ok((delta, force))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPath {
    pub start_pose: Pose,
    pub end_pose: Pose,
    /// m/s along the straight line between the two positions.
    pub speed: f64,
}

impl Default for ScanPath {
    fn default() -> Self {
        let down = Rotation::rot_x(PI);
        ScanPath {
            start_pose: Pose::new(Vec3::new(0.45, -0.05, 0.0), down),
            end_pose: Pose::new(Vec3::new(0.45, 0.05, 0.0), down),
            speed: 0.01,
        }
    }
}

impl ScanPath {
    pub fn validate(&self) -> Result<(), RobotError> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(RobotError::InvalidPath("speed must be > 0".into()));
        }
        if !(self.start_pose.position.is_finite() && self.end_pose.position.is_finite()) {
            return Err(RobotError::InvalidPath("non-finite pose".into()));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.start_pose.position.distance(self.end_pose.position)
    }

    pub fn duration(&self) -> f64 {
        self.length() / self.speed
    }

    fn velocity(&self, t: f64) -> Vec3 {
        let len = self.length();
        if len == 0.0 || t >= self.duration() {
            return Vec3::ZERO;
        }
        (self.end_pose.position - self.start_pose.position) * (self.speed / len)
    }
}

/// Commanded pose `t` seconds after the scan starts.
pub fn scan_waypoint(path: &ScanPath, t: f64) -> Pose {
    let len = path.length();
    let frac = if len == 0.0 {
        1.0
    } else {
        (t.max(0.0) * path.speed / len).min(1.0)
    };
    if frac >= 1.0 {
        return path.end_pose;
    }
    if frac <= 0.0 {
        return path.start_pose;
    }
    Pose::new(
        path.start_pose.position.lerp(path.end_pose.position, frac),
        path.start_pose
            .orientation
            .slerp(path.end_pose.orientation, frac),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Virtual mass of the force-controlled axis (kg).
    pub virtual_mass: f64,
    /// Contact force above which the scan is aborted (N).
    pub force_limit: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            virtual_mass: 1.0,
            force_limit: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Seconds since the scan started.
    pub time: f64,
    pub probe_pose: Pose,
    /// Depth below the tissue surface (m), zero out of contact.
    pub penetration: f64,
    /// Rate of change of depth, `-dz/dt` (m/s); also tracked out of contact.
    pub penetration_rate: f64,
    pub contact_force: f64,
    pub joint_state: JointState,
    pub joint_torques: Vec<f64>,
}

impl SimState {
    /// Probe at rest at `pose`.
    pub fn at_pose(pose: Pose, tissue: &TissueModel) -> SimState {
        SimState {
            time: 0.0,
            probe_pose: pose,
            penetration: tissue.penetration(pose.position.z),
            penetration_rate: 0.0,
            contact_force: contact_force(tissue, pose.position.z, 0.0),
            joint_state: KinematicChain::gantry_inverse(&pose),
            joint_torques: vec![0.0; 6],
        }
    }
}

/// Advances the simulation by `dt` seconds.
pub fn step_simulation(
    state: &SimState,
    gains: &ImpedanceGains,
    tissue: &TissueModel,
    path: &ScanPath,
    params: &SimParams,
    dt: f64,
) -> Result<SimState, RobotError> {
    if !(dt > 0.0 && dt <= MAX_TIMESTEP) {
        return Err(RobotError::InvalidTimestep(dt));
    }
    let time = state.time + dt;
    let cmd = scan_waypoint(path, time);
    let cmd_vel = path.velocity(time);

    let z = state.probe_pose.position.z;
    let zdot = -state.penetration_rate;
    let mut err = PoseError::default();
    err.e[AXIAL] = cmd.position.z - z;
    err.edot[AXIAL] = cmd_vel.z - zdot;
    let wrench = impedance_wrench(gains, &err);
    let reaction = contact_force(tissue, z, zdot);
    let accel = (wrench[AXIAL] + reaction) / params.virtual_mass;

    let zdot = zdot + accel * dt;
    let z = z + zdot * dt;
    let position = Vec3::new(cmd.position.x, cmd.position.y, z);
    let probe_pose = Pose::new(position, cmd.orientation);

    let joint_q = KinematicChain::gantry_inverse(&probe_pose).q;
    let qdot = joint_q
        .iter()
        .zip(&state.joint_state.q)
        .enumerate()
        .map(|(i, (a, b))| {
            let d = a - b;
            // revolute joints of the gantry wrap at +-pi
            let d = if i >= 3 {
                (d + PI).rem_euclid(2.0 * PI) - PI
            } else {
                d
            };
            d / dt
        })
        .collect();
    let joint_state = JointState { q: joint_q, qdot };

    let chain = KinematicChain::cartesian_gantry();
    let jac = geometric_jacobian(&chain, &joint_state)?;
    let mut logged = PoseError::between(&probe_pose, &cmd);
    logged.edot[AXIAL] = cmd_vel.z - zdot;
    let joint_torques = impedance_torque(&jac, gains, &logged);

    let next = SimState {
        time,
        probe_pose,
        penetration: tissue.penetration(z),
        penetration_rate: -zdot,
        contact_force: contact_force(tissue, z, zdot),
        joint_state,
        joint_torques,
    };
    if !next.contact_force.is_finite() || next.contact_force > params.force_limit {
        return Err(RobotError::ForceLimitExceeded {
            force: next.contact_force,
            state: Box::new(next),
        });
    }
    Ok(next)
}

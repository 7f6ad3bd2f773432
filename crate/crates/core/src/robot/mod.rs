//! Serial-manipulator kinematics, the impedance control law, a spring tissue
//! contact model and the deterministic scan simulator.

mod impedance;
mod kinematics;
mod sim;

use thiserror::Error;

pub use impedance::{impedance_torque, impedance_wrench, ImpedanceGains, PoseError, AXIAL};
pub use kinematics::{
    forward_kinematics, geometric_jacobian, Jacobian, Joint, JointState, JointType, KinematicChain,
};
pub use sim::{
    contact_force, equilibrium_contact_force, scan_waypoint, step_simulation, ScanPath, SimParams,
    SimState, TissueModel, MAX_TIMESTEP,
};

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("joint state has {found} entries, chain has {expected} joints")]
    LengthMismatch { expected: usize, found: usize },
    #[error("joint state contains non-finite values")]
    NonFinite,
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
    #[error("invalid impedance gains: {0}")]
    InvalidGains(String),
    #[error("invalid tissue model: {0}")]
    InvalidTissue(String),
    #[error("invalid scan path: {0}")]
    InvalidPath(String),
    #[error("combined stiffness must be positive, got {0}")]
    NonpositiveStiffness(f64),
    #[error("timestep {0} s outside (0, {MAX_TIMESTEP}]")]
    InvalidTimestep(f64),
    #[error("contact force {force:.3} N exceeds the safety limit")]
    ForceLimitExceeded { force: f64, state: Box<SimState> },
}

//! Serial-chain forward kinematics and the geometric Jacobian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RobotError;
use crate::spatial::{Pose, RigidTransform, Rotation, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// One joint: a fixed offset from the previous frame, followed by motion
/// about/along `axis` (expressed in the offset frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: Vec3,
    #[serde(rename = "type")]
    pub joint_type: JointType,
    #[serde(default)]
    pub offset: RigidTransform,
}

impl Joint {
    pub fn revolute(axis: Vec3, offset: RigidTransform) -> Self {
        Joint {
            axis,
            joint_type: JointType::Revolute,
            offset,
        }
    }

    pub fn prismatic(axis: Vec3, offset: RigidTransform) -> Self {
        Joint {
            axis,
            joint_type: JointType::Prismatic,
            offset,
        }
    }

    fn motion(&self, q: f64) -> RigidTransform {
        match self.joint_type {
            JointType::Revolute => RigidTransform::from_rotation(
                Rotation::from_axis_angle(self.axis, q).unwrap_or(Rotation::IDENTITY),
            ),
            JointType::Prismatic => RigidTransform::from_translation(self.axis * q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    tool_offset: RigidTransform,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ChainFile {
    Joints(Vec<Joint>),
    Full {
        joints: Vec<Joint>,
        #[serde(default)]
        tool_offset: RigidTransform,
    },
}

impl KinematicChain {
    pub fn new(joints: Vec<Joint>, tool_offset: RigidTransform) -> Result<Self, RobotError> {
        if joints.is_empty() {
            return Err(RobotError::InvalidChain("chain has no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            if !j.axis.is_finite() || (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(RobotError::InvalidChain(format!(
                    "joint {i} axis is not a unit vector"
                )));
            }
        }
        Ok(Self {
            joints,
            tool_offset,
        })
    }

    /// Three prismatic joints (x, y, z) followed by yaw-pitch-roll revolute
    /// joints (z, y, x). Its inverse kinematics is closed-form, which lets the
    /// simulator keep a consistent joint state for any probe pose.
    pub fn cartesian_gantry() -> Self {
        let id = RigidTransform::IDENTITY;
        KinematicChain {
            joints: vec![
                Joint::prismatic(Vec3::X, id),
                Joint::prismatic(Vec3::Y, id),
                Joint::prismatic(Vec3::Z, id),
                Joint::revolute(Vec3::Z, id),
                Joint::revolute(Vec3::Y, id),
                Joint::revolute(Vec3::X, id),
            ],
            tool_offset: id,
        }
    }

    /// Joint positions of [`Self::cartesian_gantry`] realizing `pose`.
    pub fn gantry_inverse(pose: &Pose) -> JointState {
        let m = pose.orientation.to_matrix();
        // R = Rz(yaw) Ry(pitch) Rx(roll)
        let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let (yaw, roll) = if m[2][0].abs() < 1.0 - 1e-12 {
            (m[1][0].atan2(m[0][0]), m[2][1].atan2(m[2][2]))
        } else {
            ((-m[0][1]).atan2(m[1][1]), 0.0)
        };
        let p = pose.position;
        JointState::at_rest(vec![p.x, p.y, p.z, yaw, pitch, roll])
    }

    pub fn from_json(text: &str) -> Result<Self, RobotError> {
        let file: ChainFile =
            serde_json::from_str(text).map_err(|e| RobotError::InvalidChain(e.to_string()))?;
        match file {
            ChainFile::Joints(joints) => Self::new(joints, RigidTransform::IDENTITY),
            ChainFile::Full {
                joints,
                tool_offset,
            } => Self::new(joints, tool_offset),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, RobotError> {
        let text = fs::read_to_string(path).map_err(|e| RobotError::InvalidChain(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn tool_offset(&self) -> RigidTransform {
        self.tool_offset
    }

    fn check(&self, q: &JointState) -> Result<(), RobotError> {
        if q.q.len() != self.joints.len() || q.qdot.len() != self.joints.len() {
            return Err(RobotError::LengthMismatch {
                expected: self.joints.len(),
                found: q.q.len(),
            });
        }
        if !q.q.iter().chain(&q.qdot).all(|v| v.is_finite()) {
            return Err(RobotError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl JointState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let qdot = vec![0.0; q.len()];
        JointState { q, qdot }
    }
}

pub fn forward_kinematics(chain: &KinematicChain, q: &JointState) -> Result<Pose, RobotError> {
    chain.check(q)?;
    let tip = chain
        .joints
        .iter()
        .zip(&q.q)
        .fold(RigidTransform::IDENTITY, |acc, (j, &qi)| {
            acc.compose(&j.offset).compose(&j.motion(qi))
        });
    Ok(tip.compose(&chain.tool_offset).into())
}

/// 6 x n geometric Jacobian, stored column-major. Rows 0..3 are the linear
/// velocity of the tool point, rows 3..6 the angular velocity, both in the
/// base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    columns: Vec<[f64; 6]>,
}

impl Jacobian {
    pub fn from_columns(columns: Vec<[f64; 6]>) -> Self {
        Jacobian { columns }
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> [f64; 6] {
        self.columns[i]
    }

    pub fn columns(&self) -> &[[f64; 6]] {
        &self.columns
    }

    pub fn linear(&self, i: usize) -> Vec3 {
        let c = self.columns[i];
        Vec3::new(c[0], c[1], c[2])
    }

    pub fn angular(&self, i: usize) -> Vec3 {
        let c = self.columns[i];
        Vec3::new(c[3], c[4], c[5])
    }

    /// `J^T w`.
    pub fn transpose_mul(&self, w: &[f64; 6]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn geometric_jacobian(chain: &KinematicChain, q: &JointState) -> Result<Jacobian, RobotError> {
    chain.check(q)?;
    let mut frames = Vec::with_capacity(chain.joints.len());
    let mut acc = RigidTransform::IDENTITY;
    for (j, &qi) in chain.joints.iter().zip(&q.q) {
        let at_joint = acc.compose(&j.offset);
        frames.push((at_joint.transform_vector(j.axis), at_joint.translation));
        acc = at_joint.compose(&j.motion(qi));
    }
    let tool = acc.compose(&chain.tool_offset).translation;
    let columns = chain
        .joints
        .iter()
        .zip(frames)
        .map(|(j, (axis, origin))| match j.joint_type {
            JointType::Revolute => {
                let lin = axis.cross(tool - origin);
                [lin.x, lin.y, lin.z, axis.x, axis.y, axis.z]
            }
            JointType::Prismatic => [axis.x, axis.y, axis.z, 0.0, 0.0, 0.0],
        })
        .collect();
    Ok(Jacobian { columns })
}

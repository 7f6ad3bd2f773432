//! Procedural avatar behaviors: head look-at and a two-bone arm that reaches
//! for the probe once it comes within range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{Rotation, Vec3};

/// Disengage only once the probe is this many engage radii away.
pub const REACH_HYSTERESIS: f64 = 1.05;

#[derive(Debug, Error, PartialEq)]
pub enum AvatarError {
    #[error("look-at target coincides with the head position")]
    DegenerateTarget,
    #[error("pole hint is collinear with the shoulder-target line")]
    DegeneratePole,
    #[error("invalid rig: {0}")]
    InvalidRig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvatarRig {
    pub head_position: Vec3,
    pub head_forward_rest: Vec3,
    pub shoulder_position: Vec3,
    pub upper_arm_length: f64,
    pub forearm_length: f64,
    pub reach_engage_radius: f64,
    /// Direction of the relaxed upper arm, used as the reference for the
    /// reported shoulder rotation.
    #[serde(default = "default_arm_rest")]
    pub upper_arm_rest: Vec3,
    /// Point the elbow bends toward.
    #[serde(default = "default_elbow_pole")]
    pub elbow_pole: Vec3,
}

fn default_arm_rest() -> Vec3 {
    -Vec3::Z
}

fn default_elbow_pole() -> Vec3 {
    Vec3::new(0.6, 0.45, 0.1)
}

impl Default for AvatarRig {
    /// Seated beside the bed; the default scan path comes within arm reach
    /// about halfway along.
    fn default() -> Self {
        AvatarRig {
            head_position: Vec3::new(0.3, 0.5, 0.55),
            head_forward_rest: -Vec3::Y,
            shoulder_position: Vec3::new(0.3, 0.45, 0.35),
            upper_arm_length: 0.3,
            forearm_length: 0.28,
            reach_engage_radius: 0.58,
            upper_arm_rest: default_arm_rest(),
            elbow_pole: default_elbow_pole(),
        }
    }
}

impl AvatarRig {
    pub fn validate(&self) -> Result<(), AvatarError> {
        if !(self.upper_arm_length > 0.0 && self.forearm_length > 0.0) {
            return Err(AvatarError::InvalidRig(
                "segment lengths must be > 0".into(),
            ));
        }
        if !(self.reach_engage_radius > 0.0)
            || self.reach_engage_radius > self.upper_arm_length + self.forearm_length
        {
            return Err(AvatarError::InvalidRig(
                "engage radius must be in (0, arm length]".into(),
            ));
        }
        if self.head_forward_rest.try_normalize().is_none()
            || self.upper_arm_rest.try_normalize().is_none()
        {
            return Err(AvatarError::InvalidRig(
                "rest directions must be non-zero".into(),
            ));
        }
        Ok(())
    }

    pub fn arm_length(&self) -> f64 {
        self.upper_arm_length + self.forearm_length
    }
}

/// Head rotation (relative to rest) that points the face at `target`
/// without roll about the forward axis.
pub fn look_at(rig: &AvatarRig, target: Vec3) -> Result<Rotation, AvatarError> {
    let dir = (target - rig.head_position)
        .try_normalize()
        .ok_or(AvatarError::DegenerateTarget)?;
    Rotation::between(rig.head_forward_rest, dir).ok_or(AvatarError::DegenerateTarget)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSolution {
    /// Interior angle at the elbow: pi when straight.
    pub elbow_angle: f64,
    pub shoulder_rotation: Rotation,
    pub elbow_position: Vec3,
    pub wrist_position: Vec3,
    pub reachable: bool,
}

/// Places the wrist on `target` when it is reachable, bending the elbow in the
/// plane spanned by the shoulder-target line and `pole_hint`. Out-of-range
/// targets produce a clamped arm pointing at the target.
pub fn two_bone_ik(
    rig: &AvatarRig,
    target: Vec3,
    pole_hint: Vec3,
) -> Result<ArmSolution, AvatarError> {
    let u = rig.upper_arm_length;
    let f = rig.forearm_length;
    let shoulder = rig.shoulder_position;
    let to_target = target - shoulder;
    let dist = to_target.norm();
    let dir = to_target
        .try_normalize()
        .ok_or(AvatarError::DegeneratePole)?;

    let pole = pole_hint - shoulder;
    let bend = (pole - dir * pole.dot(dir)).try_normalize();
    let bend = match bend {
        Some(b) if (pole - dir * pole.dot(dir)).norm() > 1e-9 * pole.norm().max(1.0) => b,
        _ => return Err(AvatarError::DegeneratePole),
    };

    let (reach, reachable) = if dist > u + f {
        (u + f, false)
    } else if dist < (u - f).abs() {
        ((u - f).abs(), false)
    } else {
        (dist, true)
    };

    // interior elbow angle from the law of cosines
    let cos_elbow = ((u * u + f * f - reach * reach) / (2.0 * u * f)).clamp(-1.0, 1.0);
    let elbow_angle = cos_elbow.acos();
    // shoulder angle between the target line and the upper arm
    let cos_shoulder = if reach > 0.0 {
        ((u * u + reach * reach - f * f) / (2.0 * u * reach)).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    let sin_shoulder = (1.0 - cos_shoulder * cos_shoulder).max(0.0).sqrt();
    let upper_dir = dir * cos_shoulder + bend * sin_shoulder;
    let elbow = shoulder + upper_dir * u;

    let wrist_goal = if reachable {
        target
    } else {
        shoulder + dir * reach
    };
    let fore_dir = (wrist_goal - elbow).try_normalize().unwrap_or(dir);
    let wrist = elbow + fore_dir * f;

    let shoulder_rotation =
        Rotation::between(rig.upper_arm_rest, upper_dir).unwrap_or(Rotation::IDENTITY);
    Ok(ArmSolution {
        elbow_angle,
        shoulder_rotation,
        elbow_position: elbow,
        wrist_position: wrist,
        reachable,
    })
}

/// Engagement memory for the reach behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReachState {
    pub engaged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachUpdate {
    pub engaged: bool,
    pub solution: Option<ArmSolution>,
}

/// Engages when the probe is within the engage radius of the shoulder and
/// stays engaged until it leaves `REACH_HYSTERESIS` times that radius.
pub fn update_reach_behavior(
    rig: &AvatarRig,
    state: &mut ReachState,
    probe_position: Vec3,
) -> ReachUpdate {
    let d = probe_position.distance(rig.shoulder_position);
    let limit = if state.engaged {
        REACH_HYSTERESIS * rig.reach_engage_radius
    } else {
        rig.reach_engage_radius
    };
    state.engaged = d <= limit;
    let solution = if state.engaged {
        two_bone_ik(rig, probe_position, rig.elbow_pole).ok()
    } else {
        None
    };
    ReachUpdate {
        engaged: state.engaged,
        solution,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_arm() -> AvatarRig {
        AvatarRig {
            head_position: Vec3::ZERO,
            head_forward_rest: Vec3::Z,
            shoulder_position: Vec3::ZERO,
            upper_arm_length: 1.0,
            forearm_length: 1.0,
            reach_engage_radius: 2.0,
            upper_arm_rest: -Vec3::Z,
            elbow_pole: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    #[test]
    fn look_at_examples() {
        let rig = unit_arm();
        assert!(look_at(&rig, Vec3::new(0.0, 0.0, 5.0)).unwrap().angle() < 1e-12);
        let r = look_at(&rig, Vec3::X).unwrap();
        assert!(r.angle_to(Rotation::rot_y(FRAC_PI_2)) < 1e-12);
        let r = look_at(&rig, -Vec3::Z).unwrap();
        assert!(r.apply(Vec3::Z).distance(-Vec3::Z) < 1e-6);
        assert_eq!(
            look_at(&rig, Vec3::ZERO),
            Err(AvatarError::DegenerateTarget)
        );
    }

    #[test]
    fn two_bone_examples() {
        let rig = unit_arm();
        let s = two_bone_ik(&rig, Vec3::new(2.0, 0.0, 0.0), Vec3::Y).unwrap();
        assert!(s.reachable);
        assert!((s.elbow_angle - PI).abs() < 1e-7);

        let s = two_bone_ik(&rig, Vec3::new(1.0, 1.0, 0.0), Vec3::Z).unwrap();
        assert!((s.elbow_angle - FRAC_PI_2).abs() < 1e-12);
        assert!(s.wrist_position.distance(Vec3::new(1.0, 1.0, 0.0)) < 1e-9);

        let s = two_bone_ik(&rig, Vec3::new(3.0, 0.0, 0.0), Vec3::Y).unwrap();
        assert!(!s.reachable);
        assert!(s.wrist_position.distance(Vec3::new(2.0, 0.0, 0.0)) < 1e-12);

        assert_eq!(
            two_bone_ik(&rig, Vec3::X, Vec3::X * 3.0),
            Err(AvatarError::DegeneratePole)
        );
    }

    #[test]
    fn elbow_bends_toward_pole() {
        let rig = unit_arm();
        let s = two_bone_ik(&rig, Vec3::new(1.2, 0.0, 0.0), Vec3::new(0.5, 0.0, 1.0)).unwrap();
        assert!(s.elbow_position.z > 0.0);
        let s = two_bone_ik(&rig, Vec3::new(1.2, 0.0, 0.0), Vec3::new(0.5, 0.0, -1.0)).unwrap();
        assert!(s.elbow_position.z < 0.0);
    }

    #[test]
    fn reach_engagement_and_hysteresis() {
        let rig = AvatarRig {
            reach_engage_radius: 1.5,
            elbow_pole: Vec3::Z * 3.0,
            ..unit_arm()
        };
        let mut state = ReachState::default();
        let far = update_reach_behavior(&rig, &mut state, Vec3::new(5.0, 0.0, 0.0));
        assert!(!far.engaged && far.solution.is_none());

        let p = Vec3::new(0.9 * 1.5, 0.0, 0.0);
        let near = update_reach_behavior(&rig, &mut state, p);
        assert!(near.engaged);
        assert!(near.solution.unwrap().wrist_position.distance(p) < 1e-9);

        for k in 0..50 {
            let r = if k % 2 == 0 { 0.99 } else { 1.02 };
            let u = update_reach_behavior(&rig, &mut state, Vec3::new(r * 1.5, 0.0, 0.0));
            assert!(u.engaged, "chattered at step {k}");
        }
        assert!(!update_reach_behavior(&rig, &mut state, Vec3::new(1.06 * 1.5, 0.0, 0.0)).engaged);
        // re-engagement needs the plain radius again
        assert!(!update_reach_behavior(&rig, &mut state, Vec3::new(1.02 * 1.5, 0.0, 0.0)).engaged);
    }

    #[test]
    fn rig_validation() {
        assert!(AvatarRig::default().validate().is_ok());
        let bad = AvatarRig {
            reach_engage_radius: 3.0,
            ..unit_arm()
        };
        assert!(bad.validate().is_err());
    }
}

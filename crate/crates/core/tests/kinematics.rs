use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sono_core::robot::{
    forward_kinematics, geometric_jacobian, impedance_torque, ImpedanceGains, Joint, JointState,
    KinematicChain, PoseError,
};
use sono_core::spatial::{RigidTransform, Rotation, Vec3};

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if let Some(u) = v.try_normalize() {
            if v.norm() > 0.1 {
                return u;
            }
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let r = Rotation::from_axis_angle(unit(rng), rng.random_range(-3.0..3.0)).unwrap();
    let t = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    RigidTransform::new(r, t)
}

fn random_chain(rng: &mut ChaCha8Rng) -> KinematicChain {
    let n = rng.random_range(1..=7);
    let joints = (0..n)
        .map(|_| {
            let axis = unit(rng);
            let offset = random_transform(rng);
            if rng.random_bool(0.7) {
                Joint::revolute(axis, offset)
            } else {
                Joint::prismatic(axis, offset)
            }
        })
        .collect();
    KinematicChain::new(joints, random_transform(rng)).unwrap()
}

/// Central differences of forward kinematics, angular part from the
/// relative rotation `R(q + h) R(q - h)^-1`.
fn finite_difference_jacobian(chain: &KinematicChain, q: &[f64], h: f64) -> Vec<[f64; 6]> {
    (0..q.len())
        .map(|i| {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[i] += h;
            qm[i] -= h;
            let p = forward_kinematics(chain, &JointState::at_rest(qp)).unwrap();
            let m = forward_kinematics(chain, &JointState::at_rest(qm)).unwrap();
            let lin = (p.position - m.position) * (1.0 / (2.0 * h));
            let ang = p
                .orientation
                .compose_raw(m.orientation.inverse())
                .to_rotation_vector()
                * (1.0 / (2.0 * h));
            [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z]
        })
        .collect()
}

#[test]
fn jacobian_matches_finite_differences_on_random_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let chain = random_chain(&mut rng);
        let q: Vec<f64> = (0..chain.dof())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let j = geometric_jacobian(&chain, &JointState::at_rest(q.clone())).unwrap();
        let fd = finite_difference_jacobian(&chain, &q, 1e-6);
        for (col, oracle) in j.columns().iter().zip(&fd) {
            let scale = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            for (a, b) in col.iter().zip(oracle) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    assert!(worst < 1e-6, "worst relative deviation {worst:e}");
}

#[test]
fn impedance_torque_superposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gains = ImpedanceGains::default();
    let zero = PoseError::default();
    for _ in 0..100 {
        let chain = random_chain(&mut rng);
        let q: Vec<f64> = (0..chain.dof())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let j = geometric_jacobian(&chain, &JointState::at_rest(q)).unwrap();
        let mut draw = || std::array::from_fn::<f64, 6, _>(|_| rng.random_range(-0.01..0.01));
        let a = PoseError {
            e: draw(),
            edot: draw(),
            eddot: draw(),
        };
        let b = PoseError {
            e: draw(),
            edot: draw(),
            eddot: draw(),
        };
        let sum = PoseError {
            e: std::array::from_fn(|i| a.e[i] + b.e[i]),
            edot: std::array::from_fn(|i| a.edot[i] + b.edot[i]),
            eddot: std::array::from_fn(|i| a.eddot[i] + b.eddot[i]),
        };
        let t0 = impedance_torque(&j, &gains, &zero);
        let ta = impedance_torque(&j, &gains, &a);
        let tb = impedance_torque(&j, &gains, &b);
        let tab = impedance_torque(&j, &gains, &sum);
        for i in 0..t0.len() {
            let lhs = tab[i] - t0[i];
            let rhs = (ta[i] - t0[i]) + (tb[i] - t0[i]);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()),
                "joint {i}: {lhs} vs {rhs}"
            );
        }
    }
}

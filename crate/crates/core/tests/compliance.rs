use std::time::Instant;

use sono_core::robot::{
    equilibrium_contact_force, step_simulation, ImpedanceGains, ScanPath, SimParams, SimState,
    TissueModel, AXIAL,
};

/// Contact force trace over `horizon` seconds, starting at rest on the
/// surface.
fn force_trace(dt: f64, horizon: f64) -> Vec<(f64, f64)> {
    let gains = ImpedanceGains::default();
    let tissue = TissueModel::default();
    let path = ScanPath::default();
    let params = SimParams::default();
    let mut s = SimState::at_pose(path.start_pose, &tissue);
    let steps = (horizon / dt).round() as usize;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = step_simulation(&s, &gains, &tissue, &path, &params, dt).unwrap();
        out.push((s.time, s.contact_force));
    }
    out
}

#[test]
fn contact_force_settles_to_the_static_balance() {
    let started = Instant::now();
    let gains = ImpedanceGains::default();
    assert_eq!(gains.axial_force(), 8.0);
    assert_eq!(gains.stiffness[AXIAL], 500.0);
    let (_, expected) =
        equilibrium_contact_force(8.0, 500.0, TissueModel::default().stiffness).unwrap();
    assert!((expected - 7.9208).abs() < 1e-4);

    let coarse = force_trace(1e-3, 2.0);
    let fine = force_trace(5e-4, 2.0);
    let settled = coarse.last().unwrap().1;
    assert!(
        (settled - 7.9208).abs() / 7.9208 < 0.01,
        "settled at {settled}"
    );
    // inside the band well before the 2 s horizon and staying there
    let entered = coarse
        .iter()
        .rposition(|(_, f)| (f - 7.9208).abs() / 7.9208 >= 0.01)
        .map_or(0.0, |i| coarse[i].0);
    assert!(entered < 2.0, "still outside the band at {entered} s");

    let shift = (fine.last().unwrap().1 - settled).abs() / settled;
    assert!(
        shift < 1e-3,
        "halving dt moved the settled force by {shift:e}"
    );
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

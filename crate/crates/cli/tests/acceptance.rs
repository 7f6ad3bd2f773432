//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sono_core::agent::{Speaker, Utterance};
use sono_core::biosignal::{rmssd, RrSeries};
use sono_core::orchestrator::{
    replay, run_session, EventKind, Scenario, SessionLog, SessionOutcome,
};
use sono_core::phase::ProcedurePhase;
use sono_core::protocol::*;
use sono_core::registration::{kabsch_solve, PointCorrespondences};
use sono_core::robot::{
    equilibrium_contact_force, forward_kinematics, geometric_jacobian, impedance_torque,
    step_simulation, ImpedanceGains, Joint, JointState, KinematicChain, PoseError, ScanPath,
    SimParams, SimState, TissueModel, AXIAL,
};
use sono_core::spatial::{Pose, RigidTransform, Rotation, Vec3};
use sono_core::stats::{chi2_sf, wilcoxon_signed_rank, PairedSample};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.try_normalize().unwrap();
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return Rotation::from_wxyz(q[0], q[1], q[2], q[3]).unwrap();
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn registration() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut rot_max, mut trans_max, mut det_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let truth = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 2.0));
        let virt: Vec<Vec3> = (0..8).map(|_| random_vec(&mut rng, 0.5)).collect();
        let real = virt.iter().map(|p| truth.transform_point(*p)).collect();
        let got = kabsch_solve(&PointCorrespondences::new(virt, real).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .transform;
        rot_max = rot_max.max(got.rotation.angle_to(truth.rotation));
        trans_max = trans_max.max(got.translation.distance(truth.translation));
    }
    for _ in 0..100 {
        let virt: Vec<Vec3> = (0..8).map(|_| random_vec(&mut rng, 0.5)).collect();
        let real = virt.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let got = kabsch_solve(&PointCorrespondences::new(virt, real).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        det_dev = det_dev.max((det3(got.transform.rotation.to_matrix()) - 1.0).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        rot_max < 1e-9 && trans_max < 1e-9 && det_dev < 1e-9 && secs < 1.0,
        format!(
            "max rotation error {rot_max:.1e} rad, max translation error {trans_max:.1e} m, \
             mirrored |det-1| {det_dev:.1e}, {secs:.3} s"
        ),
    )
}

fn settled_force(dt: f64) -> Result<(f64, f64), String> {
    let gains = ImpedanceGains::default();
    let tissue = TissueModel::default();
    let path = ScanPath::default();
    let params = SimParams::default();
    let mut s = SimState::at_pose(path.start_pose, &tissue);
    let steps = (2.0 / dt).round() as usize;
    let mut last_outside = 0.0;
    for _ in 0..steps {
        s = step_simulation(&s, &gains, &tissue, &path, &params, dt).map_err(|e| e.to_string())?;
        if (s.contact_force - 7.9208).abs() / 7.9208 >= 0.01 {
            last_outside = s.time;
        }
    }
    Ok((s.contact_force, last_outside))
}

fn force_compliance() -> Verdict {
    let started = Instant::now();
    let gains = ImpedanceGains::default();
    let tissue = TissueModel::default();
    if gains.axial_force() != 8.0 || gains.stiffness[AXIAL] != 500.0 || tissue.stiffness != 50_000.0
    {
        return Err(
            "default gains or tissue differ from F_d = 8 N, K_m = 500 N/m, k_t = 50000 N/m".into(),
        );
    }
    let (_, balance) =
        equilibrium_contact_force(8.0, 500.0, 50_000.0).map_err(|e| e.to_string())?;
    let (coarse, entered) = settled_force(1e-3)?;
    let (fine, _) = settled_force(5e-4)?;
    let err = (coarse - 7.9208).abs() / 7.9208;
    let shift = (fine - coarse).abs() / coarse;
    let secs = started.elapsed().as_secs_f64();
    check(
        err < 0.01 && entered < 2.0 && shift < 1e-3 && secs < 5.0,
        format!(
            "settled {coarse:.5} N (static balance {balance:.5} N, error {:.3}%), inside band after {entered:.3} s, \
             dt/2 shift {:.4}%, {secs:.3} s",
            err * 100.0,
            shift * 100.0
        ),
    )
}

fn random_chain(rng: &mut ChaCha8Rng) -> KinematicChain {
    let n = rng.random_range(1..=7);
    let offset =
        |rng: &mut ChaCha8Rng| RigidTransform::new(random_rotation(rng), random_vec(rng, 0.5));
    let joints = (0..n)
        .map(|_| {
            let axis = unit(rng);
            let o = offset(rng);
            if rng.random_bool(0.7) {
                Joint::revolute(axis, o)
            } else {
                Joint::prismatic(axis, o)
            }
        })
        .collect();
    let tool = offset(rng);
    KinematicChain::new(joints, tool).unwrap()
}

fn jacobian_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let h = 1e-6;
    let (mut fd_worst, mut sup_worst) = (0.0f64, 0.0f64);
    let gains = ImpedanceGains::default();
    for _ in 0..100 {
        let chain = random_chain(&mut rng);
        let q: Vec<f64> = (0..chain.dof())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let j = geometric_jacobian(&chain, &JointState::at_rest(q.clone()))
            .map_err(|e| e.to_string())?;
        for (i, col) in j.columns().iter().enumerate() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let p =
                forward_kinematics(&chain, &JointState::at_rest(qp)).map_err(|e| e.to_string())?;
            let m =
                forward_kinematics(&chain, &JointState::at_rest(qm)).map_err(|e| e.to_string())?;
            let lin = (p.position - m.position) * (0.5 / h);
            let ang = p
                .orientation
                .compose_raw(m.orientation.inverse())
                .to_rotation_vector()
                * (0.5 / h);
            let fd = [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z];
            let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            for (a, b) in col.iter().zip(&fd) {
                fd_worst = fd_worst.max((a - b).abs() / scale);
            }
        }
        let mut draw = || -> [f64; 6] { std::array::from_fn(|_| rng.random_range(-0.01..0.01)) };
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
        let ab = PoseError {
            e: std::array::from_fn(|i| a.e[i] + b.e[i]),
            edot: std::array::from_fn(|i| a.edot[i] + b.edot[i]),
            eddot: std::array::from_fn(|i| a.eddot[i] + b.eddot[i]),
        };
        let zero = impedance_torque(&j, &gains, &PoseError::default());
        let (ta, tb, tab) = (
            impedance_torque(&j, &gains, &a),
            impedance_torque(&j, &gains, &b),
            impedance_torque(&j, &gains, &ab),
        );
        for i in 0..zero.len() {
            let lhs = tab[i] - zero[i];
            let rhs = (ta[i] - zero[i]) + (tb[i] - zero[i]);
            sup_worst = sup_worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        }
    }
    check(
        fd_worst < 1e-6 && sup_worst < 1e-12,
        format!("finite-difference deviation {fd_worst:.1e} (relative), superposition residual {sup_worst:.1e}"),
    )
}

/// P(min(W+, W-) <= w) by visiting every sign assignment.
fn enumerate_wilcoxon(ranks: &[f64], w_obs: f64) -> f64 {
    fn walk(ranks: &[f64], plus: f64, total: f64, w_obs: f64, hits: &mut u64) {
        match ranks.split_first() {
            None => {
                if plus.min(total - plus) <= w_obs + 1e-9 {
                    *hits += 1;
                }
            }
            Some((r, rest)) => {
                walk(rest, plus + r, total, w_obs, hits);
                walk(rest, plus, total, w_obs, hits);
            }
        }
    }
    let total: f64 = ranks.iter().sum();
    let mut hits = 0;
    walk(ranks, 0.0, total, w_obs, &mut hits);
    hits as f64 / 2f64.powi(ranks.len() as i32)
}

fn abs_ranks(d: &[f64]) -> Vec<f64> {
    // average ranks of |d| by counting, independent of the library ranker
    d.iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn statistics_anchors() -> Verdict {
    let trust = chi2_sf(26.95, 3.0).map_err(|e| e.to_string())?;
    let usability = chi2_sf(16.60, 3.0).map_err(|e| e.to_string())?;
    let kruskal = chi2_sf(3.430, 3.0).map_err(|e| e.to_string())?;
    let ok_anchors = (trust - 6.02e-6).abs() / 6.02e-6 < 0.02
        && (usability - 8.54e-4).abs() / 8.54e-4 < 0.02
        && (kruskal - 0.330).abs() < 0.005;

    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 200 {
        let m = rng.random_range(1..=10);
        let d: Vec<f64> = (0..m)
            .map(|_| rng.random_range(-8i32..=8) as f64 * 0.25)
            .collect();
        let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
        if nz.is_empty() {
            continue;
        }
        n += 1;
        let ranks = abs_ranks(&nz);
        let w_plus: f64 = nz
            .iter()
            .zip(&ranks)
            .filter(|(v, _)| **v > 0.0)
            .map(|(_, r)| r)
            .sum();
        let total: f64 = ranks.iter().sum();
        let oracle = enumerate_wilcoxon(&ranks, w_plus.min(total - w_plus));
        let got =
            wilcoxon_signed_rank(&PairedSample::from_differences(&d).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        worst = worst.max((got.p_value - oracle).abs());
    }
    check(
        ok_anchors && worst < 1e-12,
        format!(
            "chi2_sf: {trust:.4e}, {usability:.4e}, {kruskal:.4}; exact Wilcoxon vs enumeration on 200 samples, \
             max |dp| {worst:.1e}"
        ),
    )
}

fn rmssd_properties() -> Verdict {
    let hand =
        rmssd(&RrSeries::from_rr_ms(&[800.0, 810.0, 790.0, 805.0])).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let (mut hom, mut rev) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(3..80);
        let rr: Vec<f64> = (0..n).map(|_| rng.random_range(400.0..1500.0)).collect();
        let c = rng.random_range(0.25..4.0);
        let s = RrSeries::from_rr_ms(&rr);
        let base = rmssd(&s).map_err(|e| e.to_string())?;
        let scaled = rmssd(&s.map_rr(|v| c * v)).map_err(|e| e.to_string())?;
        let reversed = rmssd(&s.reversed()).map_err(|e| e.to_string())?;
        hom = hom.max((scaled - c * base).abs() / (c * base));
        rev = rev.max((reversed - base).abs() / base);
    }
    check(
        (hand - 15.546).abs() <= 1e-3 && hom < 1e-12 && rev < 1e-12,
        format!("hand example {hand:.4} ms; 1000 series: homogeneity {hom:.1e}, reversal {rev:.1e} (relative)"),
    )
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let pose = |rng: &mut ChaCha8Rng| Pose::new(random_vec(rng, 2.0), random_rotation(rng));
    match rng.random_range(0..7) {
        0 => Message::RobotState(RobotStateMsg {
            t: rng.random_range(0.0..1e4),
            probe: pose(rng),
            force: rng.random_range(0.0..20.0),
            phase: ProcedurePhase::ALL[rng.random_range(0..ProcedurePhase::ALL.len())],
        }),
        1 => Message::Command(CommandMsg::StartScan),
        2 => Message::Command(CommandMsg::StopScan),
        3 => Message::Command(CommandMsg::SetPath {
            start: pose(rng),
            end: pose(rng),
            speed: rng.random_range(1e-3..0.1),
        }),
        4 => {
            let speaker = if rng.random_bool(0.5) {
                Speaker::Patient
            } else {
                Speaker::Agent
            };
            let text = format!(
                "utterance {} «{}»",
                rng.random::<u32>(),
                rng.random::<f64>()
            );
            Message::AgentEvent(AgentEventMsg {
                utterance: Utterance::new(speaker, text, rng.random_range(0.0..600.0)).unwrap(),
            })
        }
        5 => Message::UltrasoundFrame(UltrasoundFrame::synthetic(
            rng.random(),
            rng.random(),
            rng.random_range(1..64),
            rng.random_range(1..64),
            rng.random_range(0..64),
        )),
        _ => Message::Heartbeat,
    }
}

fn protocol() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = encode_frame(&m).map_err(|e| e.to_string())?;
        let mut dec = FrameDecoder::new();
        if dec.feed(&bytes).map_err(|e| e.to_string())? != vec![m] || dec.buffered() != 0 {
            mismatches += 1;
        }
    }
    let messages: Vec<Message> = (0..100).map(|_| random_message(&mut rng)).collect();
    let mut stream = Vec::new();
    for m in &messages {
        stream.extend(encode_frame(m).map_err(|e| e.to_string())?);
    }
    let mut split_failures = 0;
    for _ in 0..100 {
        let mut cuts: Vec<usize> = (0..rng.random_range(1..300))
            .map(|_| rng.random_range(0..=stream.len()))
            .collect();
        cuts.extend([0, stream.len()]);
        cuts.sort_unstable();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        for w in cuts.windows(2) {
            out.extend(dec.feed(&stream[w[0]..w[1]]).map_err(|e| e.to_string())?);
        }
        if out != messages {
            split_failures += 1;
        }
    }
    check(
        mismatches == 0 && split_failures == 0,
        format!("10000 round trips, {mismatches} mismatches; 100 random splits of a {} byte stream, {split_failures} differ", stream.len()),
    )
}

fn phases_of(log: &SessionLog) -> Vec<ProcedurePhase> {
    let mut out = vec![ProcedurePhase::Setup];
    out.extend(log.events.iter().filter_map(|e| match e.kind {
        EventKind::PhaseChange { to, .. } => Some(to),
        _ => None,
    }));
    out
}

fn orchestration() -> Verdict {
    use ProcedurePhase::*;
    let demo =
        Scenario::from_path(root().join("scenarios/demo.json")).map_err(|e| e.to_string())?;
    let log = run_session(&demo.config, &demo.utterances).map_err(|e| e.to_string())?;
    let phases = phases_of(&log);
    let demo_ok = phases == [Setup, Greeting, Resting, Execution, Complete]
        && log.outcome == SessionOutcome::Complete;

    let resting: Vec<Vec3> = log
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::RobotState(s) if s.phase == Resting => Some(s.probe.position),
            _ => None,
        })
        .collect();
    let drift = resting
        .iter()
        .map(|p| p.distance(resting[0]))
        .fold(0.0, f64::max);

    let replayed = replay(&demo.config, &log.events).map_err(|e| e.to_string())?;
    let replay_ok = replayed.state() == &log.final_state && replayed.log() == &log.events[..];

    let stop = Scenario::from_path(root().join("scenarios/stop_mid_scan.json"))
        .map_err(|e| e.to_string())?;
    let stopped = run_session(&stop.config, &stop.utterances).map_err(|e| e.to_string())?;
    let stop_ok = phases_of(&stopped).last() == Some(&Aborted)
        && matches!(stopped.outcome, SessionOutcome::Aborted(_));

    let names: Vec<&str> = phases.iter().map(|p| p.as_str()).collect();
    check(
        demo_ok && stop_ok && drift < 1e-9 && !resting.is_empty() && replay_ok,
        format!(
            "demo {} ({}); stop scenario {}; resting drift {drift:.1e} m over {} samples; replay identical: {replay_ok}",
            names.join(">"),
            log.outcome,
            stopped.outcome,
            resting.len()
        ),
    )
}

fn read_tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let path = entry.path();
        if path.is_dir() {
            for (k, v) in read_tree(&path)? {
                out.insert(format!("{}/{k}", entry.file_name().to_string_lossy()), v);
            }
        } else {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(&path).map_err(|e| e.to_string())?,
            );
        }
    }
    Ok(out)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = root().join("scenarios/demo.json");
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_sono"))
            .args(["simulate", "--seed", "42", "--with-ecg", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "simulate exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        trees.push(read_tree(&out)?);
    }
    let bytes: usize = trees[0].values().map(Vec::len).sum();
    check(
        trees[0] == trees[1] && !trees[0].is_empty(),
        format!(
            "{} files, {bytes} bytes, identical: {}",
            trees[0].len(),
            trees[0] == trees[1]
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("registration", registration),
        ("force compliance", force_compliance),
        ("jacobian consistency", jacobian_consistency),
        ("statistics anchors", statistics_anchors),
        ("rmssd", rmssd_properties),
        ("protocol", protocol),
        ("orchestration", orchestration),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name:<24} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

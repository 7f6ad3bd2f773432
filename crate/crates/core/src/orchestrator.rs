//! Event-sourced procedure session.
//!
//! All state changes go through [`Session::handle_event`]. Inputs (setup
//! poses, session start, clock ticks, patient speech, client commands) are
//! appended to the log together with everything they cause, so feeding the
//! input events of a log back into a fresh session reproduces it exactly.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    phase_announcement, Agent, AgentConfig, LatencyBreakdown, ScanCommand, Speaker, Utterance,
};
use crate::avatar::{look_at, update_reach_behavior, AvatarRig, ReachState};
use crate::phase::ProcedurePhase;
use crate::robot::{
    contact_force, step_simulation, ImpedanceGains, RobotError, ScanPath, SimParams, SimState,
    TissueModel,
};
use crate::spatial::{Pose, Rotation, Vec3};

/// Upper bound on one simulation substep.
pub const MAX_SUBSTEP_S: f64 = 1e-3;
/// RobotState events are decimated to at most this rate.
pub const ROBOT_STATE_RATE_HZ: f64 = 100.0;
const TRANSCRIPT_WINDOW: usize = 8;
const SCAN_END_TOLERANCE_S: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("{what} not allowed in phase {phase}")]
    InvalidTransition { phase: ProcedurePhase, what: String },
    #[error("event time {t_s} s precedes session time {now_s} s")]
    NonMonotonicTime { t_s: f64, now_s: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub scan_path: ScanPath,
    pub gains: ImpedanceGains,
    pub tissue: TissueModel,
    pub sim: SimParams,
    pub agent: AgentConfig,
    pub avatar: AvatarRig,
    pub seed: u64,
    /// Hz, within [100, 1000].
    pub tick_rate: f64,
    pub greeting_duration_s: f64,
    pub resting_timeout_s: f64,
    /// Height of the waiting probe above the scan start (m).
    pub hover_clearance_m: f64,
    /// Height above the tissue surface at which a retract ends (m).
    pub retract_clearance_m: f64,
    pub retract_speed_m_s: f64,
    /// Where the avatar looks while talking to the patient.
    pub patient_head: Vec3,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            scan_path: ScanPath::default(),
            gains: ImpedanceGains::default(),
            tissue: TissueModel::default(),
            sim: SimParams::default(),
            agent: AgentConfig::default(),
            avatar: AvatarRig::default(),
            seed: 0,
            tick_rate: 100.0,
            greeting_duration_s: 3.0,
            resting_timeout_s: 300.0,
            hover_clearance_m: 0.01,
            retract_clearance_m: 0.05,
            retract_speed_m_s: 0.05,
            patient_head: Vec3::new(0.45, -0.6, 0.2),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| OrchestratorError::InvalidConfig(m);
        if !(100.0..=1000.0).contains(&self.tick_rate) {
            return Err(bad(format!(
                "tick_rate {} outside [100, 1000] Hz",
                self.tick_rate
            )));
        }
        self.scan_path.validate().map_err(|e| bad(e.to_string()))?;
        self.gains.validate().map_err(|e| bad(e.to_string()))?;
        self.tissue.validate().map_err(|e| bad(e.to_string()))?;
        self.agent.validate().map_err(|e| bad(e.to_string()))?;
        self.avatar.validate().map_err(|e| bad(e.to_string()))?;
        if !(self.sim.virtual_mass > 0.0 && self.sim.force_limit > 0.0) {
            return Err(bad("virtual_mass and force_limit must be > 0".into()));
        }
        let nonneg = [
            ("greeting_duration_s", self.greeting_duration_s),
            ("hover_clearance_m", self.hover_clearance_m),
            ("retract_clearance_m", self.retract_clearance_m),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{name} must be >= 0")));
            }
        }
        if !(self.resting_timeout_s > 0.0 && self.retract_speed_m_s > 0.0) {
            return Err(bad(
                "resting_timeout_s and retract_speed_m_s must be > 0".into()
            ));
        }
        if !self.patient_head.is_finite() {
            return Err(bad("patient_head must be finite".into()));
        }
        Ok(())
    }

    fn hover_pose(&self, path: &ScanPath) -> Pose {
        let start = path.start_pose;
        Pose::new(
            start.position + Vec3::Z * self.hover_clearance_m,
            start.orientation,
        )
    }

    fn robot_state_every(&self) -> u64 {
        ((self.tick_rate / ROBOT_STATE_RATE_HZ).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Input,
    Emitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSource {
    Agent,
    Client,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCause {
    Stop,
    SafetyLimit,
    Timeout,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSnapshot {
    pub phase: ProcedurePhase,
    pub probe: Pose,
    pub contact_force: f64,
    pub penetration: f64,
    pub joint_torques: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    // inputs
    SetupPoses {
        start: Pose,
        end: Pose,
    },
    SessionStart,
    Tick,
    Utterance {
        utterance: Utterance,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ms: Option<LatencyBreakdown>,
    },
    Command {
        command: ScanCommand,
        source: CommandSource,
    },
    // emitted
    PhaseChange {
        from: ProcedurePhase,
        to: ProcedurePhase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cause: Option<AbortCause>,
    },
    RobotState(RobotSnapshot),
    SafetyAbort {
        force: f64,
        limit: f64,
    },
    ScanCompleted,
    Timeout,
    Rejected {
        reason: String,
    },
    Avatar {
        engaged: bool,
        head: Rotation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        elbow_angle: Option<f64>,
    },
    RetractComplete,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SetupPoses { .. } => "setup_poses",
            EventKind::SessionStart => "session_start",
            EventKind::Tick => "tick",
            EventKind::Utterance { .. } => "utterance",
            EventKind::Command { .. } => "command",
            EventKind::PhaseChange { .. } => "phase_change",
            EventKind::RobotState(_) => "robot_state",
            EventKind::SafetyAbort { .. } => "safety_abort",
            EventKind::ScanCompleted => "scan_completed",
            EventKind::Timeout => "timeout",
            EventKind::Rejected { .. } => "rejected",
            EventKind::Avatar { .. } => "avatar",
            EventKind::RetractComplete => "retract_complete",
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(
            self,
            EventKind::SetupPoses { .. }
                | EventKind::SessionStart
                | EventKind::Tick
                | EventKind::Utterance { .. }
                | EventKind::Command { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub t_s: f64,
    pub origin: Origin,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything the session knows, excluding the log itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub phase: ProcedurePhase,
    pub t_s: f64,
    pub last_tick_s: f64,
    pub tick_count: u64,
    pub phase_entered_s: f64,
    pub path: ScanPath,
    pub probe: Pose,
    pub contact_force: f64,
    pub penetration: f64,
    pub joint_torques: Vec<f64>,
    pub sim: Option<SimState>,
    /// Session time at which the running scan started.
    pub sim_origin_s: f64,
    pub retracting: bool,
    pub finished: bool,
    pub abort_cause: Option<AbortCause>,
    pub reach: ReachState,
    pub looking_at_probe: bool,
    pub transcript: Vec<Utterance>,
    pub scans_started: u32,
}

impl SessionState {
    fn new(config: &SessionConfig) -> SessionState {
        let probe = config.hover_pose(&config.scan_path);
        SessionState {
            phase: ProcedurePhase::Setup,
            t_s: 0.0,
            last_tick_s: 0.0,
            tick_count: 0,
            phase_entered_s: 0.0,
            path: config.scan_path,
            probe,
            contact_force: contact_force(&config.tissue, probe.position.z, 0.0),
            penetration: config.tissue.penetration(probe.position.z),
            joint_torques: vec![0.0; 6],
            sim: None,
            sim_origin_s: 0.0,
            retracting: false,
            finished: false,
            abort_cause: None,
            reach: ReachState::default(),
            looking_at_probe: false,
            transcript: Vec::new(),
            scans_started: 0,
        }
    }

    /// True once nothing further will happen: Complete, or Aborted with the
    /// retract finished.
    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Complete,
    Aborted(AbortCause),
    Unfinished,
}

impl fmt::Display for SessionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionOutcome::Complete => f.write_str("complete"),
            SessionOutcome::Aborted(c) => write!(
                f,
                "aborted ({})",
                serde_json::to_value(c)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            ),
            SessionOutcome::Unfinished => f.write_str("unfinished"),
        }
    }
}

pub struct Session {
    config: SessionConfig,
    agent: Agent,
    state: SessionState,
    log: Vec<SessionEvent>,
}

/// Emitted events collected while handling one input.
struct Effects<'a> {
    log: &'a mut Vec<SessionEvent>,
    emitted: Vec<SessionEvent>,
}

impl Effects<'_> {
    fn emit(&mut self, t_s: f64, kind: EventKind) {
        let ev = SessionEvent {
            seq: self.log.len() as u64,
            t_s,
            origin: Origin::Emitted,
            kind,
        };
        self.log.push(ev.clone());
        self.emitted.push(ev);
    }
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Session, OrchestratorError> {
        config.validate()?;
        let agent = Agent::scripted(config.agent.clone());
        Ok(Session::with_agent(config, agent))
    }

    /// Session using a caller-supplied agent (e.g. an external generator).
    pub fn with_agent(config: SessionConfig, agent: Agent) -> Session {
        let state = SessionState::new(&config);
        Session {
            config,
            agent,
            state,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn phase(&self) -> ProcedurePhase {
        self.state.phase
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    pub fn into_log(self) -> Vec<SessionEvent> {
        self.log
    }

    pub fn outcome(&self) -> SessionOutcome {
        match (self.state.phase, self.state.abort_cause) {
            (ProcedurePhase::Complete, _) => SessionOutcome::Complete,
            (ProcedurePhase::Aborted, Some(c)) => SessionOutcome::Aborted(c),
            _ => SessionOutcome::Unfinished,
        }
    }

    /// Applies one input event. The input and all effects are appended to
    /// the log; the emitted events are returned. A rejected input leaves the
    /// state untouched and is logged with a `Rejected` event.
    pub fn handle_event(
        &mut self,
        t_s: f64,
        kind: EventKind,
    ) -> Result<Vec<SessionEvent>, OrchestratorError> {
        if !kind.is_input() {
            return Err(OrchestratorError::InvalidInput(format!(
                "{} is not an input event",
                kind.name()
            )));
        }
        if !t_s.is_finite() {
            return Err(OrchestratorError::InvalidInput(
                "non-finite timestamp".into(),
            ));
        }
        let input_t = t_s.max(self.state.t_s);
        self.log.push(SessionEvent {
            seq: self.log.len() as u64,
            t_s: input_t,
            origin: Origin::Input,
            kind: kind.clone(),
        });

        let mut next = self.state.clone();
        let mut fx = Effects {
            log: &mut self.log,
            emitted: Vec::new(),
        };
        let result = apply(&self.config, &self.agent, &mut next, &mut fx, t_s, kind);
        match result {
            Ok(()) => {
                self.state = next;
                Ok(fx.emitted)
            }
            Err(e) => {
                // drop partial effects, keep the input and the rejection
                let keep = fx.log.len() - fx.emitted.len();
                fx.log.truncate(keep);
                fx.emitted.clear();
                fx.emit(
                    input_t,
                    EventKind::Rejected {
                        reason: e.to_string(),
                    },
                );
                Err(e)
            }
        }
    }
}

fn apply(
    cfg: &SessionConfig,
    agent: &Agent,
    st: &mut SessionState,
    fx: &mut Effects<'_>,
    t_s: f64,
    kind: EventKind,
) -> Result<(), OrchestratorError> {
    use ProcedurePhase::*;
    if t_s < st.t_s {
        return Err(OrchestratorError::NonMonotonicTime { t_s, now_s: st.t_s });
    }
    let invalid = |phase: ProcedurePhase, what: &str| OrchestratorError::InvalidTransition {
        phase,
        what: what.to_string(),
    };
    match kind {
        EventKind::SetupPoses { start, end } => {
            if st.phase != Setup {
                return Err(invalid(st.phase, "setup_poses"));
            }
            let path = ScanPath {
                start_pose: start,
                end_pose: end,
                speed: cfg.scan_path.speed,
            };
            path.validate()
                .map_err(|e| OrchestratorError::InvalidInput(e.to_string()))?;
            st.t_s = t_s;
            st.path = path;
            st.probe = cfg.hover_pose(&path);
            st.contact_force = contact_force(&cfg.tissue, st.probe.position.z, 0.0);
            st.penetration = cfg.tissue.penetration(st.probe.position.z);
        }
        EventKind::SessionStart => {
            if st.phase != Setup {
                return Err(invalid(st.phase, "session_start"));
            }
            st.t_s = t_s;
            st.last_tick_s = t_s;
            change_phase(cfg, st, fx, Greeting, None)?;
        }
        EventKind::Utterance { utterance, .. } => {
            if utterance.speaker != Speaker::Patient {
                return Err(OrchestratorError::InvalidInput(
                    "only patient utterances are inputs".into(),
                ));
            }
            if utterance.text.trim().is_empty() {
                return Err(OrchestratorError::InvalidInput("empty utterance".into()));
            }
            if st.phase == Setup {
                return Err(invalid(st.phase, "utterance"));
            }
            st.t_s = t_s;
            let utterance = Utterance {
                timestamp: t_s,
                ..utterance
            };
            st.transcript.push(utterance);
            let window_start = st.transcript.len().saturating_sub(TRANSCRIPT_WINDOW);
            let seed = reply_seed(cfg.seed, fx.log.len() as u64);
            let reply = agent.reply(st.phase, &st.transcript[window_start..], seed);
            let said = Utterance {
                speaker: Speaker::Agent,
                text: reply.text,
                timestamp: t_s,
            };
            st.transcript.push(said.clone());
            fx.emit(
                t_s,
                EventKind::Utterance {
                    utterance: said,
                    latency_ms: Some(reply.simulated_latency_ms),
                },
            );
            if let Some(command) = reply.command {
                fx.emit(
                    t_s,
                    EventKind::Command {
                        command,
                        source: CommandSource::Agent,
                    },
                );
                apply_command(cfg, st, fx, command)?;
            }
        }
        EventKind::Command { command, .. } => {
            st.t_s = t_s;
            apply_command(cfg, st, fx, command)?;
        }
        EventKind::Tick => {
            if t_s <= st.last_tick_s && st.tick_count > 0 {
                return Err(OrchestratorError::NonMonotonicTime {
                    t_s,
                    now_s: st.last_tick_s,
                });
            }
            st.t_s = t_s;
            tick(cfg, st, fx, t_s)?;
        }
        _ => unreachable!("checked by is_input"),
    }
    Ok(())
}

fn reply_seed(seed: u64, seq: u64) -> u64 {
    seed ^ seq.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn apply_command(
    cfg: &SessionConfig,
    st: &mut SessionState,
    fx: &mut Effects<'_>,
    command: ScanCommand,
) -> Result<(), OrchestratorError> {
    use ProcedurePhase::*;
    match (command, st.phase) {
        (ScanCommand::StartScan, Resting) => {
            change_phase(cfg, st, fx, Execution, None)?;
            st.scans_started += 1;
            let mut sim = SimState::at_pose(st.probe, &cfg.tissue);
            sim.time = 0.0;
            st.sim = Some(sim);
            st.sim_origin_s = st.t_s;
            Ok(())
        }
        (ScanCommand::StopScan, Resting | Execution) => abort(cfg, st, fx, AbortCause::Stop),
        (cmd, phase) => Err(OrchestratorError::InvalidTransition {
            phase,
            what: serde_json::to_value(cmd)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
        }),
    }
}

fn change_phase(
    cfg: &SessionConfig,
    st: &mut SessionState,
    fx: &mut Effects<'_>,
    to: ProcedurePhase,
    cause: Option<AbortCause>,
) -> Result<(), OrchestratorError> {
    let from = st.phase;
    let announcement =
        phase_announcement(from, to, st.t_s).map_err(|_| OrchestratorError::InvalidTransition {
            phase: from,
            what: format!("change to {to}"),
        })?;
    st.phase = to;
    st.phase_entered_s = st.t_s;
    fx.emit(st.t_s, EventKind::PhaseChange { from, to, cause });
    st.transcript.push(announcement.clone());
    fx.emit(
        st.t_s,
        EventKind::Utterance {
            utterance: announcement,
            latency_ms: None,
        },
    );
    if to == ProcedurePhase::Complete {
        st.finished = true;
    }
    update_avatar(cfg, st, fx, true);
    Ok(())
}

fn abort(
    cfg: &SessionConfig,
    st: &mut SessionState,
    fx: &mut Effects<'_>,
    cause: AbortCause,
) -> Result<(), OrchestratorError> {
    st.abort_cause = Some(cause);
    st.sim = None;
    st.retracting = true;
    change_phase(cfg, st, fx, ProcedurePhase::Aborted, Some(cause))
}

fn tick(
    cfg: &SessionConfig,
    st: &mut SessionState,
    fx: &mut Effects<'_>,
    t_s: f64,
) -> Result<(), OrchestratorError> {
    use ProcedurePhase::*;
    let dt_total = t_s - st.last_tick_s;
    st.last_tick_s = t_s;
    st.tick_count += 1;
    if st.finished || st.phase == Setup {
        return Ok(());
    }

    match st.phase {
        Greeting if t_s - st.phase_entered_s >= cfg.greeting_duration_s => {
            change_phase(cfg, st, fx, Resting, None)?;
        }
        Resting if t_s - st.phase_entered_s >= cfg.resting_timeout_s => {
            fx.emit(t_s, EventKind::Timeout);
            abort(cfg, st, fx, AbortCause::Timeout)?;
        }
        _ => {}
    }

    // the scan clock starts at the command, not at the previous tick
    let sim_span = match (&st.sim, st.phase) {
        (Some(sim), Execution) => (t_s - st.sim_origin_s - sim.time).max(0.0),
        _ => 0.0,
    };
    let substeps = if sim_span > 1e-12 {
        (sim_span / MAX_SUBSTEP_S).ceil() as u64
    } else {
        0
    };
    let dt = if substeps > 0 {
        sim_span / substeps as f64
    } else {
        0.0
    };
    let mut scan_done = false;
    if st.phase == Execution {
        for _ in 0..substeps {
            let Some(sim) = st.sim.as_ref() else { break };
            match step_simulation(sim, &cfg.gains, &cfg.tissue, &st.path, &cfg.sim, dt) {
                Ok(next) => {
                    take_sim_sample(st, &next);
                    let done = next.time >= st.path.duration() - SCAN_END_TOLERANCE_S;
                    st.sim = Some(next);
                    if done {
                        scan_done = true;
                        break;
                    }
                }
                Err(RobotError::ForceLimitExceeded { force, state }) => {
                    take_sim_sample(st, &state);
                    fx.emit(
                        t_s,
                        EventKind::SafetyAbort {
                            force,
                            limit: cfg.sim.force_limit,
                        },
                    );
                    abort(cfg, st, fx, AbortCause::SafetyLimit)?;
                    break;
                }
                Err(e) => {
                    log::error!("simulation fault: {e}");
                    abort(cfg, st, fx, AbortCause::Fault)?;
                    break;
                }
            }
        }
    } else if st.retracting {
        let target_z = cfg.tissue.surface_height + cfg.retract_clearance_m;
        let z = (st.probe.position.z + cfg.retract_speed_m_s * dt_total)
            .min(target_z.max(st.probe.position.z));
        st.probe.position.z = z;
        st.contact_force = contact_force(&cfg.tissue, z, cfg.retract_speed_m_s);
        st.penetration = cfg.tissue.penetration(z);
        st.joint_torques = vec![0.0; 6];
    }

    update_avatar(cfg, st, fx, false);
    let emit_state = st.tick_count.is_multiple_of(cfg.robot_state_every()) || scan_done;
    let retract_done =
        st.retracting && st.probe.position.z >= cfg.tissue.surface_height + cfg.retract_clearance_m;
    if emit_state || retract_done {
        fx.emit(t_s, EventKind::RobotState(snapshot(st)));
    }
    if scan_done {
        fx.emit(t_s, EventKind::ScanCompleted);
        st.sim = None;
        change_phase(cfg, st, fx, Complete, None)?;
    }
    if retract_done {
        st.retracting = false;
        st.finished = true;
        fx.emit(t_s, EventKind::RetractComplete);
    }
    Ok(())
}

fn take_sim_sample(st: &mut SessionState, sim: &SimState) {
    st.probe = sim.probe_pose;
    st.contact_force = sim.contact_force;
    st.penetration = sim.penetration;
    st.joint_torques = sim.joint_torques.clone();
}

fn snapshot(st: &SessionState) -> RobotSnapshot {
    RobotSnapshot {
        phase: st.phase,
        probe: st.probe,
        contact_force: st.contact_force,
        penetration: st.penetration,
        joint_torques: st.joint_torques.clone(),
    }
}

/// Head follows the probe during the scan and the patient otherwise; the arm
/// reaches for the probe when it comes close. Emits only on changes.
fn update_avatar(cfg: &SessionConfig, st: &mut SessionState, fx: &mut Effects<'_>, force: bool) {
    let was_engaged = st.reach.engaged;
    let reach = update_reach_behavior(&cfg.avatar, &mut st.reach, st.probe.position);
    let watch_probe = st.phase == ProcedurePhase::Execution;
    let changed = force || reach.engaged != was_engaged || watch_probe != st.looking_at_probe;
    st.looking_at_probe = watch_probe;
    if !changed {
        return;
    }
    let target = if watch_probe {
        st.probe.position
    } else {
        cfg.patient_head
    };
    let head = look_at(&cfg.avatar, target).unwrap_or(Rotation::IDENTITY);
    fx.emit(
        st.t_s,
        EventKind::Avatar {
            engaged: reach.engaged,
            head,
            elbow_angle: reach.solution.map(|s| s.elbow_angle),
        },
    );
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledUtterance {
    pub t_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub config: SessionConfig,
    pub utterances: Vec<ScheduledUtterance>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, OrchestratorError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.config.validate()?;
        for (i, u) in s.utterances.iter().enumerate() {
            if !(u.t_s.is_finite() && u.t_s >= 0.0) {
                return Err(OrchestratorError::InvalidInput(format!(
                    "utterance {i}: t_s must be >= 0"
                )));
            }
            if u.text.trim().is_empty() {
                return Err(OrchestratorError::InvalidInput(format!(
                    "utterance {i}: empty text"
                )));
            }
        }
        Ok(s)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Scenario, OrchestratorError> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub events: Vec<SessionEvent>,
    pub final_state: SessionState,
    pub outcome: SessionOutcome,
}

/// Runs a scripted session to completion on a simulated clock.
pub fn run_session(
    config: &SessionConfig,
    utterances: &[ScheduledUtterance],
) -> Result<SessionLog, OrchestratorError> {
    let mut session = Session::new(config.clone())?;
    let path = config.scan_path;
    let _ = session.handle_event(
        0.0,
        EventKind::SetupPoses {
            start: path.start_pose,
            end: path.end_pose,
        },
    );
    let _ = session.handle_event(0.0, EventKind::SessionStart);

    let mut schedule: Vec<&ScheduledUtterance> = utterances.iter().collect();
    schedule.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    let mut pending = schedule.into_iter().peekable();

    let retract_s =
        (config.retract_clearance_m + config.hover_clearance_m + 0.1) / config.retract_speed_m_s;
    let horizon_s =
        config.greeting_duration_s + config.resting_timeout_s + path.duration() + retract_s + 1.0;
    let max_ticks = (horizon_s * config.tick_rate).ceil() as u64;
    for k in 1..=max_ticks {
        let t = k as f64 / config.tick_rate;
        while let Some(u) = pending.next_if(|u| u.t_s <= t) {
            match Utterance::patient(u.text.clone(), u.t_s) {
                Ok(utt) => {
                    let _ = session.handle_event(
                        u.t_s,
                        EventKind::Utterance {
                            utterance: utt,
                            latency_ms: None,
                        },
                    );
                }
                Err(e) => log::warn!("skipping scheduled utterance at {} s: {e}", u.t_s),
            }
        }
        let _ = session.handle_event(t, EventKind::Tick);
        if session.state().is_finished() {
            break;
        }
    }
    let outcome = session.outcome();
    let final_state = session.state().clone();
    Ok(SessionLog {
        events: session.into_log(),
        final_state,
        outcome,
    })
}

/// Feeds the input events of `events` through a fresh session.
pub fn replay(
    config: &SessionConfig,
    events: &[SessionEvent],
) -> Result<Session, OrchestratorError> {
    let mut session = Session::new(config.clone())?;
    for ev in events.iter().filter(|e| e.origin == Origin::Input) {
        let _ = session.handle_event(ev.t_s, ev.kind.clone());
    }
    Ok(session)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub phase: ProcedurePhase,
    pub t_start: f64,
    pub t_end: f64,
}

impl PhaseInterval {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Contiguous phase intervals spanning the log, from its first to its last
/// event.
pub fn phase_intervals(log: &[SessionEvent]) -> Result<Vec<PhaseInterval>, OrchestratorError> {
    let first = log
        .first()
        .ok_or_else(|| OrchestratorError::MalformedLog("empty log".into()))?;
    let mut out = Vec::new();
    let mut current = ProcedurePhase::Setup;
    let mut start = first.t_s;
    let mut last_t = first.t_s;
    for ev in log {
        if !(ev.t_s >= last_t) {
            return Err(OrchestratorError::MalformedLog(format!(
                "event {} goes back in time",
                ev.seq
            )));
        }
        last_t = ev.t_s;
        if let EventKind::PhaseChange { from, to, .. } = ev.kind {
            if from != current || !from.can_transition_to(to) {
                return Err(OrchestratorError::MalformedLog(format!(
                    "event {}: change {from} -> {to} while in {current}",
                    ev.seq
                )));
            }
            out.push(PhaseInterval {
                phase: current,
                t_start: start,
                t_end: ev.t_s,
            });
            current = to;
            start = ev.t_s;
        }
    }
    out.push(PhaseInterval {
        phase: current,
        t_start: start,
        t_end: last_t,
    });
    Ok(out)
}

pub fn write_log_jsonl<W: Write>(
    events: &[SessionEvent],
    mut w: W,
) -> Result<(), OrchestratorError> {
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_jsonl<R: BufRead>(r: R) -> Result<Vec<SessionEvent>, OrchestratorError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| OrchestratorError::MalformedLog(format!("line {}: {e}", i + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_phase_intervals_csv<W: Write>(
    intervals: &[PhaseInterval],
    w: W,
) -> Result<(), OrchestratorError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["phase", "t_start", "t_end"])
        .map_err(csv_io)?;
    for iv in intervals {
        csv.write_record([
            iv.phase.as_str().to_string(),
            iv.t_start.to_string(),
            iv.t_end.to_string(),
        ])
        .map_err(csv_io)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_phase_intervals_csv<R: io::Read>(
    r: R,
) -> Result<Vec<PhaseInterval>, OrchestratorError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers().map_err(csv_io)?.clone();
    if headers.iter().take(3).collect::<Vec<_>>() != ["phase", "t_start", "t_end"] {
        return Err(OrchestratorError::MalformedLog(
            "expected header phase,t_start,t_end".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| OrchestratorError::MalformedLog(format!("row {row}: {e}")))?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let phase = field(0)
            .parse()
            .map_err(|e| OrchestratorError::MalformedLog(format!("row {row}: {e}")))?;
        let num = |k: usize| {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    OrchestratorError::MalformedLog(format!("row {row}: bad number `{}`", field(k)))
                })
        };
        let (t_start, t_end) = (num(1)?, num(2)?);
        if t_end < t_start {
            return Err(OrchestratorError::MalformedLog(format!(
                "row {row}: t_end before t_start"
            )));
        }
        out.push(PhaseInterval {
            phase,
            t_start,
            t_end,
        });
    }
    Ok(out)
}

/// `t_s,px,py,pz,delta_m,force_n,phase`, one row per RobotState event.
pub fn write_simulation_csv<W: Write>(
    events: &[SessionEvent],
    w: W,
) -> Result<(), OrchestratorError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["t_s", "px", "py", "pz", "delta_m", "force_n", "phase"])
        .map_err(csv_io)?;
    for ev in events {
        if let EventKind::RobotState(s) = &ev.kind {
            let p = s.probe.position;
            csv.write_record([
                ev.t_s.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
                s.penetration.to_string(),
                s.contact_force.to_string(),
                s.phase.as_str().to_string(),
            ])
            .map_err(csv_io)?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> OrchestratorError {
    OrchestratorError::Io(io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ProcedurePhase::*;

    fn say(t: f64, text: &str) -> ScheduledUtterance {
        ScheduledUtterance {
            t_s: t,
            text: text.into(),
        }
    }

    fn phases(log: &[SessionEvent]) -> Vec<ProcedurePhase> {
        let mut out = vec![Setup];
        out.extend(log.iter().filter_map(|e| match e.kind {
            EventKind::PhaseChange { to, .. } => Some(to),
            _ => None,
        }));
        out
    }

    fn fast_config() -> SessionConfig {
        let mut cfg = SessionConfig::default();
        cfg.scan_path.speed = 0.05;
        cfg
    }

    #[test]
    fn start_in_resting_begins_execution() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        s.handle_event(0.0, EventKind::SessionStart).unwrap();
        s.handle_event(3.0, EventKind::Tick).unwrap();
        assert_eq!(s.phase(), Resting);
        let out = s
            .handle_event(
                4.0,
                EventKind::Command {
                    command: ScanCommand::StartScan,
                    source: CommandSource::Client,
                },
            )
            .unwrap();
        assert_eq!(s.phase(), Execution);
        assert!(out.iter().any(|e| matches!(&e.kind, EventKind::Utterance { utterance, .. } if utterance.text.contains("scan is starting"))));
    }

    #[test]
    fn start_during_execution_is_rejected_without_state_change() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        s.handle_event(0.0, EventKind::SessionStart).unwrap();
        s.handle_event(3.0, EventKind::Tick).unwrap();
        let cmd = EventKind::Command {
            command: ScanCommand::StartScan,
            source: CommandSource::Client,
        };
        s.handle_event(4.0, cmd.clone()).unwrap();
        let before = s.state().clone();
        let err = s.handle_event(4.0, cmd).unwrap_err();
        assert!(matches!(
            err,
            OrchestratorError::InvalidTransition {
                phase: Execution,
                ..
            }
        ));
        assert_eq!(s.state(), &before);
        assert!(matches!(
            s.log().last().unwrap().kind,
            EventKind::Rejected { .. }
        ));
    }

    #[test]
    fn scripted_session_completes() {
        let log = run_session(
            &fast_config(),
            &[
                say(1.0, "hello"),
                say(4.0, "will it hurt?"),
                say(6.0, "please begin"),
            ],
        )
        .unwrap();
        assert_eq!(log.outcome, SessionOutcome::Complete);
        assert_eq!(
            phases(&log.events),
            vec![Setup, Greeting, Resting, Execution, Complete]
        );
        let iv = phase_intervals(&log.events).unwrap();
        assert_eq!(iv.iter().filter(|i| i.phase == Execution).count(), 1);
        let total: f64 = iv.iter().map(PhaseInterval::duration).sum();
        let span = log.events.last().unwrap().t_s - log.events[0].t_s;
        assert!((total - span).abs() < 1.0 / 100.0);
    }

    #[test]
    fn silence_times_out() {
        let cfg = SessionConfig {
            resting_timeout_s: 5.0,
            ..fast_config()
        };
        let log = run_session(&cfg, &[]).unwrap();
        assert_eq!(log.outcome, SessionOutcome::Aborted(AbortCause::Timeout));
        assert!(log.events.iter().any(|e| e.kind == EventKind::Timeout));
    }

    #[test]
    fn stop_mid_scan_aborts_and_goes_quiet() {
        let log = run_session(
            &SessionConfig::default(),
            &[say(4.0, "begin"), say(8.0, "stop!")],
        )
        .unwrap();
        assert_eq!(log.outcome, SessionOutcome::Aborted(AbortCause::Stop));
        assert_eq!(
            phases(&log.events),
            vec![Setup, Greeting, Resting, Execution, Aborted]
        );
        let done = log
            .events
            .iter()
            .position(|e| e.kind == EventKind::RetractComplete)
            .unwrap();
        assert!(!log.events[done + 1..]
            .iter()
            .any(|e| matches!(e.kind, EventKind::RobotState(_))));
    }

    #[test]
    fn default_scan_stays_under_limit_and_settles() {
        let log = run_session(&SessionConfig::default(), &[say(4.0, "begin")]).unwrap();
        assert_eq!(log.outcome, SessionOutcome::Complete);
        let exec: Vec<(f64, f64)> = log
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::RobotState(s) if s.phase == Execution => Some((e.t_s, s.contact_force)),
                _ => None,
            })
            .collect();
        let peak = exec.iter().map(|p| p.1).fold(0.0, f64::max);
        assert!(peak < SimParams::default().force_limit, "peak {peak}");
        let last = exec.last().unwrap().1;
        assert!((last - 7.9208).abs() / 7.9208 < 0.01, "settled {last}");
        assert!(log
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Avatar { engaged: true, .. })));
    }

    #[test]
    fn resting_probe_is_still() {
        let log = run_session(&fast_config(), &[say(6.0, "start")]).unwrap();
        let resting: Vec<Vec3> = log
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::RobotState(s) if s.phase == Resting => Some(s.probe.position),
                _ => None,
            })
            .collect();
        assert!(resting.len() > 100);
        for w in resting.windows(2) {
            assert!(w[0].distance(w[1]) < 1e-9);
        }
    }

    #[test]
    fn replay_reproduces_state_and_log() {
        let log = run_session(&fast_config(), &[say(1.0, "hi"), say(5.0, "please begin")]).unwrap();
        let again = replay(&fast_config(), &log.events).unwrap();
        assert_eq!(again.state(), &log.final_state);
        assert_eq!(again.log(), &log.events[..]);
    }

    #[test]
    fn timestamps_never_decrease() {
        let log = run_session(
            &fast_config(),
            &[say(2.5, "what happens now?"), say(5.0, "begin")],
        )
        .unwrap();
        for w in log.events.windows(2) {
            assert!(w[1].t_s >= w[0].t_s);
            assert_eq!(w[1].seq, w[0].seq + 1);
        }
    }

    #[test]
    fn jsonl_and_interval_csv_round_trip() {
        let log = run_session(&fast_config(), &[say(5.0, "begin")]).unwrap();
        let mut buf = Vec::new();
        write_log_jsonl(&log.events, &mut buf).unwrap();
        assert_eq!(read_log_jsonl(&buf[..]).unwrap(), log.events);

        let iv = phase_intervals(&log.events).unwrap();
        let mut csv = Vec::new();
        write_phase_intervals_csv(&iv, &mut csv).unwrap();
        assert_eq!(read_phase_intervals_csv(&csv[..]).unwrap(), iv);
    }

    #[test]
    fn malformed_logs() {
        assert!(phase_intervals(&[]).is_err());
        let ev = |seq, t_s, kind| SessionEvent {
            seq,
            t_s,
            origin: Origin::Emitted,
            kind,
        };
        let bad = [ev(
            0,
            0.0,
            EventKind::PhaseChange {
                from: Setup,
                to: Execution,
                cause: None,
            },
        )];
        assert!(matches!(
            phase_intervals(&bad),
            Err(OrchestratorError::MalformedLog(_))
        ));
        let back = [ev(0, 1.0, EventKind::Tick), ev(1, 0.5, EventKind::Tick)];
        assert!(phase_intervals(&back).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig {
            tick_rate: 50.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SessionConfig {
            tick_rate: 1000.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(Scenario::from_json(r#"{"config":{"tick_rate":2000}}"#).is_err());
        assert!(Scenario::from_json(r#"{"utterances":[{"t_s":1,"text":" "}]}"#).is_err());
        assert!(Scenario::from_json(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn emitted_events_are_not_inputs() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        assert!(matches!(
            s.handle_event(0.0, EventKind::ScanCompleted),
            Err(OrchestratorError::InvalidInput(_))
        ));
        assert!(s.log().is_empty());
    }
}

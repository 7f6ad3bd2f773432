//! Live session host. One task owns the [`Session`] and advances it on a
//! paced clock; clients on the framed TCP endpoint and on the WebSocket
//! console bridge receive its broadcasts, and everything they send is
//! funneled into that task's queue.

mod bridge;
mod tcp;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use sono_core::agent::{ScanCommand, Speaker, Utterance};
use sono_core::orchestrator::{
    CommandSource, EventKind, OrchestratorError, ScheduledUtterance, Session, SessionConfig,
    SessionEvent, SessionOutcome, SessionState,
};
use sono_core::protocol::{encode_frame, BridgeMessage, CommandMsg, Message, RobotStateMsg};
use sono_core::spatial::Pose;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::{Instant, MissedTickBehavior};

const BROADCAST_CAPACITY: usize = 8192;
const INBOUND_CAPACITY: usize = 1024;
const WALL_TICK: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("invalid server config: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] OrchestratorError),
    #[error("session task failed: {0}")]
    Join(String),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub tcp_bind: SocketAddr,
    /// Console bridge; `None` disables it.
    pub ws_bind: Option<SocketAddr>,
    pub session: SessionConfig,
    pub utterances: Vec<ScheduledUtterance>,
    /// Simulated seconds per wall-clock second.
    pub pace: f64,
    /// RobotState broadcast rate in simulated time.
    pub state_rate_hz: f64,
    pub heartbeat_interval: Option<Duration>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            tcp_bind: SocketAddr::from(([127, 0, 0, 1], 7400)),
            ws_bind: Some(SocketAddr::from(([127, 0, 0, 1], 7401))),
            session: SessionConfig::default(),
            utterances: Vec::new(),
            pace: 1.0,
            state_rate_hz: 50.0,
            heartbeat_interval: Some(Duration::from_secs(1)),
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if !(self.pace > 0.0 && self.pace.is_finite()) {
            return Err(ServerError::Config(format!(
                "pace must be > 0, got {}",
                self.pace
            )));
        }
        if !(self.state_rate_hz > 0.0 && self.state_rate_hz <= self.session.tick_rate) {
            return Err(ServerError::Config(format!(
                "state rate must lie in (0, {}] Hz, got {}",
                self.session.tick_rate, self.state_rate_hz
            )));
        }
        self.session.validate()?;
        Ok(())
    }
}

/// What a client may ask of the session.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Command(ScanCommand),
    Utterance(String),
    SetPath { start: Pose, end: Pose },
}

impl Inbound {
    fn from_message(m: Message) -> Option<Inbound> {
        match m {
            Message::Command(CommandMsg::StartScan) => {
                Some(Inbound::Command(ScanCommand::StartScan))
            }
            Message::Command(CommandMsg::StopScan) => Some(Inbound::Command(ScanCommand::StopScan)),
            Message::Command(CommandMsg::SetPath { start, end, .. }) => {
                Some(Inbound::SetPath { start, end })
            }
            Message::AgentEvent(a) if a.utterance.speaker == Speaker::Patient => {
                Some(Inbound::Utterance(a.utterance.text))
            }
            other => {
                log::debug!("ignoring client message of type 0x{:02x}", other.type_id());
                None
            }
        }
    }

    fn from_bridge(m: BridgeMessage) -> Option<Inbound> {
        match m {
            BridgeMessage::Command { cmd } => Some(Inbound::Command(cmd)),
            BridgeMessage::Chat {
                speaker: Speaker::Patient,
                text,
            } => Some(Inbound::Utterance(text)),
            _ => None,
        }
    }
}

/// One broadcast item, encoded once for every client.
#[derive(Debug, Clone)]
pub(crate) struct Outbound {
    frame: Arc<[u8]>,
    bridge: Option<Arc<str>>,
}

impl Outbound {
    fn new(m: &Message) -> Option<Outbound> {
        match encode_frame(m) {
            Ok(frame) => Some(Outbound {
                frame: frame.into(),
                bridge: BridgeMessage::from_message(m).map(|b| b.to_json().into()),
            }),
            Err(e) => {
                log::warn!("not broadcasting invalid message: {e}");
                None
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerReport {
    pub events: Vec<SessionEvent>,
    pub outcome: SessionOutcome,
}

pub struct Server {
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    inbound: mpsc::Sender<Inbound>,
    shutdown: watch::Sender<bool>,
    session_task: JoinHandle<Session>,
    acceptors: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds both endpoints and starts the session clock.
    pub async fn start(config: ServerConfig) -> Result<Server, ServerError> {
        config.validate()?;
        let session = Session::new(config.session.clone())?;

        let tcp = TcpListener::bind(config.tcp_bind)
            .await
            .map_err(|source| ServerError::Bind {
                addr: config.tcp_bind,
                source,
            })?;
        let ws = match config.ws_bind {
            Some(addr) => Some(
                TcpListener::bind(addr)
                    .await
                    .map_err(|source| ServerError::Bind { addr, source })?,
            ),
            None => None,
        };
        let tcp_addr = tcp.local_addr().map_err(|source| ServerError::Bind {
            addr: config.tcp_bind,
            source,
        })?;
        let ws_addr = ws.as_ref().and_then(|l| l.local_addr().ok());

        let (out_tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        let (in_tx, in_rx) = mpsc::channel(INBOUND_CAPACITY);
        let (sd_tx, sd_rx) = watch::channel(false);

        // acceptors hold weak senders so that the channel closes, and every
        // client is released, when the session task ends
        let mut acceptors = vec![tokio::spawn(tcp::accept_loop(
            tcp,
            out_tx.downgrade(),
            in_tx.clone(),
            sd_rx.clone(),
        ))];
        if let Some(ws) = ws {
            acceptors.push(tokio::spawn(bridge::accept_loop(
                ws,
                out_tx.downgrade(),
                in_tx.clone(),
                sd_rx.clone(),
            )));
        }
        log::info!("protocol endpoint on {tcp_addr}");
        if let Some(a) = ws_addr {
            log::info!("console bridge on ws://{a}");
        }

        let session_task = tokio::spawn(session_loop(session, config, in_rx, out_tx, sd_rx));
        Ok(Server {
            tcp_addr,
            ws_addr,
            inbound: in_tx,
            shutdown: sd_tx,
            session_task,
            acceptors,
        })
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// Queue feeding the session, as used by the endpoints.
    pub fn inbound(&self) -> mpsc::Sender<Inbound> {
        self.inbound.clone()
    }

    /// Stops the clock; [`Server::join`] then returns what was recorded.
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
    }

    pub fn is_finished(&self) -> bool {
        self.session_task.is_finished()
    }

    /// Waits for the session to finish or be shut down, then closes all
    /// endpoints.
    pub async fn join(self) -> Result<ServerReport, ServerError> {
        let session = self
            .session_task
            .await
            .map_err(|e| ServerError::Join(e.to_string()))?;
        let _ = self.shutdown.send(true);
        for a in self.acceptors {
            let _ = a.await;
        }
        let outcome = session.outcome();
        Ok(ServerReport {
            events: session.into_log(),
            outcome,
        })
    }
}

struct Publisher {
    out: broadcast::Sender<Outbound>,
    state_period: f64,
    last_state_t: Option<f64>,
    realtime: bool,
    pace: f64,
}

impl Publisher {
    fn publish(&mut self, events: &[SessionEvent]) {
        for ev in events {
            if let EventKind::RobotState(_) = ev.kind {
                if self
                    .last_state_t
                    .is_some_and(|t| ev.t_s < t + self.state_period - 1e-9)
                {
                    continue;
                }
                self.last_state_t = Some(ev.t_s);
            }
            let Some(msg) = Message::from_event(ev) else {
                continue;
            };
            let Some(item) = Outbound::new(&msg) else {
                continue;
            };
            match &ev.kind {
                EventKind::Utterance {
                    utterance,
                    latency_ms: Some(l),
                } if self.realtime && utterance.speaker == Speaker::Agent => {
                    let delay =
                        Duration::from_secs_f64((l.total_ms() / 1000.0 / self.pace).max(0.0));
                    let out = self.out.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(delay).await;
                        let _ = out.send(item);
                    });
                }
                _ => {
                    // no receivers is fine
                    let _ = self.out.send(item);
                }
            }
        }
    }

    /// Terminal snapshot at the next broadcast slot; the session itself
    /// is silent once finished.
    fn publish_final(&mut self, st: &SessionState) {
        let t = self
            .last_state_t
            .map_or(st.t_s, |t| (t + self.state_period).max(st.t_s));
        let msg = Message::RobotState(RobotStateMsg {
            t,
            probe: st.probe,
            force: st.contact_force.max(0.0),
            phase: st.phase,
        });
        if let Some(item) = Outbound::new(&msg) {
            self.last_state_t = Some(t);
            let _ = self.out.send(item);
        }
    }
}

fn apply(session: &mut Session, publisher: &mut Publisher, t_s: f64, kind: EventKind) {
    match session.handle_event(t_s, kind) {
        Ok(events) => publisher.publish(&events),
        Err(e) => log::warn!("session rejected input: {e}"),
    }
}

async fn session_loop(
    mut session: Session,
    config: ServerConfig,
    mut inbound: mpsc::Receiver<Inbound>,
    out: broadcast::Sender<Outbound>,
    mut shutdown: watch::Receiver<bool>,
) -> Session {
    let mut publisher = Publisher {
        out,
        state_period: 1.0 / config.state_rate_hz,
        last_state_t: None,
        realtime: config.session.agent.realtime,
        pace: config.pace,
    };
    let path = config.session.scan_path;
    apply(
        &mut session,
        &mut publisher,
        0.0,
        EventKind::SetupPoses {
            start: path.start_pose,
            end: path.end_pose,
        },
    );
    apply(&mut session, &mut publisher, 0.0, EventKind::SessionStart);

    let mut schedule = config.utterances.clone();
    schedule.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    let mut pending = schedule.into_iter().peekable();

    let tick_rate = config.session.tick_rate;
    let started = Instant::now();
    let mut k: u64 = 0;
    let mut wall = tokio::time::interval(WALL_TICK);
    wall.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let heartbeat_period = config
        .heartbeat_interval
        .unwrap_or(Duration::from_secs(3600));
    let mut heartbeat =
        tokio::time::interval_at(Instant::now() + heartbeat_period, heartbeat_period);
    heartbeat.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let heartbeat_frame = Outbound::new(&Message::Heartbeat);

    while !session.state().is_finished() {
        tokio::select! {
            _ = wall.tick() => {
                let target = started.elapsed().as_secs_f64() * config.pace;
                while (k + 1) as f64 / tick_rate <= target && !session.state().is_finished() {
                    k += 1;
                    let t = k as f64 / tick_rate;
                    while let Some(u) = pending.next_if(|u| u.t_s <= t) {
                        let t_u = u.t_s.max(session.state().t_s);
                        match Utterance::patient(u.text, t_u) {
                            Ok(utterance) => apply(
                                &mut session,
                                &mut publisher,
                                t_u,
                                EventKind::Utterance { utterance, latency_ms: None },
                            ),
                            Err(e) => log::warn!("skipping scheduled utterance: {e}"),
                        }
                    }
                    apply(&mut session, &mut publisher, t, EventKind::Tick);
                }
            }
            Some(msg) = inbound.recv() => {
                let t = session.state().t_s;
                let kind = match msg {
                    Inbound::Command(command) => EventKind::Command { command, source: CommandSource::Client },
                    Inbound::Utterance(text) => match Utterance::patient(text, t) {
                        Ok(utterance) => EventKind::Utterance { utterance, latency_ms: None },
                        Err(e) => {
                            log::warn!("ignoring client utterance: {e}");
                            continue;
                        }
                    },
                    Inbound::SetPath { start, end } => EventKind::SetupPoses { start, end },
                };
                apply(&mut session, &mut publisher, t, kind);
            }
            _ = heartbeat.tick(), if config.heartbeat_interval.is_some() => {
                if let Some(h) = &heartbeat_frame {
                    let _ = publisher.out.send(h.clone());
                }
            }
            changed = shutdown.changed() => {
                if changed.is_err() || *shutdown.borrow() {
                    log::info!("shutting down at t = {:.3} s", session.state().t_s);
                    break;
                }
            }
        }
    }
    if session.state().is_finished() {
        publisher.publish_final(session.state());
    }
    log::info!("session ended: {}", session.outcome());
    session
}

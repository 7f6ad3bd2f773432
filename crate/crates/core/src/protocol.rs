//! Framed wire protocol between the robot side and visualization clients.
//!
//! Frame layout: `len:u32be | type:u8 | payload`, where `len` counts payload
//! bytes only. Payloads are JSON objects except for ultrasound frames, which
//! carry a 16-byte big-endian header followed by raw 8-bit pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ScanCommand, Speaker, Utterance};
use crate::orchestrator::{EventKind, SessionEvent};
use crate::phase::ProcedurePhase;
use crate::spatial::{Pose, Vec3};

pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 5;
const FRAME_HEADER_LEN: usize = 16;

pub const TYPE_ROBOT_STATE: u8 = 0x01;
pub const TYPE_COMMAND: u8 = 0x02;
pub const TYPE_AGENT_EVENT: u8 = 0x03;
pub const TYPE_ULTRASOUND_FRAME: u8 = 0x04;
pub const TYPE_HEARTBEAT: u8 = 0x05;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    OversizePayload(usize),
    #[error("frame announces {0} payload bytes, above the limit")]
    CorruptLength(u32),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotStateMsg {
    /// Session time (s).
    pub t: f64,
    pub probe: Pose,
    /// Contact force (N).
    pub force: f64,
    pub phase: ProcedurePhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommandMsg {
    StartScan,
    StopScan,
    SetPath { start: Pose, end: Pose, speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEventMsg {
    pub utterance: Utterance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UltrasoundFrame {
    pub seq: u32,
    pub t_ms: u32,
    pub width: u32,
    pub height: u32,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl UltrasoundFrame {
    /// Stub image: a depth gradient with a bright band that shifts with
    /// `phase_px`.
    pub fn synthetic(
        seq: u32,
        t_ms: u32,
        width: u32,
        height: u32,
        phase_px: u32,
    ) -> UltrasoundFrame {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for r in 0..height {
            let depth = if height > 1 {
                255 - (r * 200 / (height - 1))
            } else {
                255
            };
            for c in 0..width {
                let band = (c + phase_px) % 32 < 4;
                pixels.push(if band { 255 } else { depth as u8 });
            }
        }
        UltrasoundFrame {
            seq,
            t_ms,
            width,
            height,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    RobotState(RobotStateMsg),
    Command(CommandMsg),
    AgentEvent(AgentEventMsg),
    UltrasoundFrame(UltrasoundFrame),
    Heartbeat,
}

impl Message {
    pub fn type_id(&self) -> u8 {
        match self {
            Message::RobotState(_) => TYPE_ROBOT_STATE,
            Message::Command(_) => TYPE_COMMAND,
            Message::AgentEvent(_) => TYPE_AGENT_EVENT,
            Message::UltrasoundFrame(_) => TYPE_ULTRASOUND_FRAME,
            Message::Heartbeat => TYPE_HEARTBEAT,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidMessage(m.into()));
        match self {
            Message::RobotState(s) => {
                if !(s.force.is_finite() && s.force >= 0.0) {
                    return bad("force must be finite and >= 0");
                }
                if !s.t.is_finite() || !s.probe.position.is_finite() {
                    return bad("non-finite robot state");
                }
            }
            Message::Command(CommandMsg::SetPath { start, end, speed }) => {
                if !(speed.is_finite() && *speed > 0.0)
                    || !start.position.is_finite()
                    || !end.position.is_finite()
                {
                    return bad("invalid path");
                }
            }
            Message::AgentEvent(a) => {
                if a.utterance.text.trim().is_empty() || !a.utterance.timestamp.is_finite() {
                    return bad("invalid utterance");
                }
            }
            Message::UltrasoundFrame(f) => {
                if f.pixels.len() as u64 != f.width as u64 * f.height as u64 {
                    return bad("pixel count differs from width x height");
                }
            }
            Message::Command(_) | Message::Heartbeat => {}
        }
        Ok(())
    }

    fn payload(&self) -> Result<Vec<u8>, ProtocolError> {
        let json = |r: serde_json::Result<Vec<u8>>| {
            r.map_err(|e| ProtocolError::InvalidMessage(e.to_string()))
        };
        match self {
            Message::RobotState(s) => json(serde_json::to_vec(s)),
            Message::Command(c) => json(serde_json::to_vec(c)),
            Message::AgentEvent(a) => json(serde_json::to_vec(a)),
            Message::UltrasoundFrame(f) => {
                let mut out = Vec::with_capacity(FRAME_HEADER_LEN + f.pixels.len());
                for v in [f.seq, f.t_ms, f.width, f.height] {
                    out.extend_from_slice(&v.to_be_bytes());
                }
                out.extend_from_slice(&f.pixels);
                Ok(out)
            }
            Message::Heartbeat => Ok(Vec::new()),
        }
    }

    fn from_payload(type_id: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
        let invalid = |e: serde_json::Error| ProtocolError::InvalidMessage(e.to_string());
        let msg = match type_id {
            TYPE_ROBOT_STATE => {
                Message::RobotState(serde_json::from_slice(payload).map_err(invalid)?)
            }
            TYPE_COMMAND => Message::Command(serde_json::from_slice(payload).map_err(invalid)?),
            TYPE_AGENT_EVENT => {
                Message::AgentEvent(serde_json::from_slice(payload).map_err(invalid)?)
            }
            TYPE_ULTRASOUND_FRAME => {
                if payload.len() < FRAME_HEADER_LEN {
                    return Err(ProtocolError::InvalidMessage(
                        "short ultrasound frame header".into(),
                    ));
                }
                let word = |i: usize| {
                    u32::from_be_bytes(payload[4 * i..4 * i + 4].try_into().expect("4 bytes"))
                };
                Message::UltrasoundFrame(UltrasoundFrame {
                    seq: word(0),
                    t_ms: word(1),
                    width: word(2),
                    height: word(3),
                    pixels: payload[FRAME_HEADER_LEN..].to_vec(),
                })
            }
            TYPE_HEARTBEAT => {
                // empty payload on the wire; `{}` accepted from lenient peers
                if !payload.is_empty() {
                    let v: serde_json::Map<String, serde_json::Value> =
                        serde_json::from_slice(payload).map_err(invalid)?;
                    if !v.is_empty() {
                        return Err(ProtocolError::InvalidMessage(
                            "heartbeat carries fields".into(),
                        ));
                    }
                }
                Message::Heartbeat
            }
            other => {
                return Err(ProtocolError::InvalidMessage(format!(
                    "unknown type 0x{other:02x}"
                )))
            }
        };
        msg.validate()?;
        Ok(msg)
    }

    /// Wire message for a session event, if it is one that gets broadcast.
    pub fn from_event(ev: &SessionEvent) -> Option<Message> {
        match &ev.kind {
            EventKind::RobotState(s) => Some(Message::RobotState(RobotStateMsg {
                t: ev.t_s,
                probe: s.probe,
                force: s.contact_force.max(0.0),
                phase: s.phase,
            })),
            EventKind::Utterance { utterance, .. } => Some(Message::AgentEvent(AgentEventMsg {
                utterance: utterance.clone(),
            })),
            _ => None,
        }
    }
}

pub fn encode_frame(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    m.validate()?;
    let payload = m.payload()?;
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::OversizePayload(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(m.type_id());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// A frame that was consumed but not turned into a message.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    UnknownType { type_id: u8, len: usize },
    InvalidPayload { type_id: u8, reason: String },
}

/// Reassembles frames from arbitrary chunks of a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    diagnostics: Vec<Diagnostic>,
    poisoned: Option<u32>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Messages completed by `chunk`, in stream order. A corrupt length is
    /// fatal: the decoder refuses all further input.
    pub fn feed(&mut self, chunk: &[u8]) -> Result<Vec<Message>, ProtocolError> {
        if let Some(len) = self.poisoned {
            return Err(ProtocolError::CorruptLength(len));
        }
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut pos = 0;
        while self.buf.len() - pos >= HEADER_LEN {
            let len = u32::from_be_bytes(self.buf[pos..pos + 4].try_into().expect("4 bytes"));
            if len as usize > MAX_PAYLOAD {
                self.poisoned = Some(len);
                self.buf.clear();
                return Err(ProtocolError::CorruptLength(len));
            }
            let end = pos + HEADER_LEN + len as usize;
            if self.buf.len() < end {
                break;
            }
            let type_id = self.buf[pos + 4];
            let payload = &self.buf[pos + HEADER_LEN..end];
            if !(TYPE_ROBOT_STATE..=TYPE_HEARTBEAT).contains(&type_id) {
                log::warn!("skipping frame with unknown type 0x{type_id:02x}");
                self.diagnostics.push(Diagnostic::UnknownType {
                    type_id,
                    len: len as usize,
                });
            } else {
                match Message::from_payload(type_id, payload) {
                    Ok(m) => out.push(m),
                    Err(e) => {
                        log::warn!("skipping invalid frame: {e}");
                        self.diagnostics.push(Diagnostic::InvalidPayload {
                            type_id,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            pos = end;
        }
        self.buf.drain(..pos);
        Ok(out)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn take_diagnostics(&mut self) -> Vec<Diagnostic> {
        std::mem::take(&mut self.diagnostics)
    }
}

/// JSON text messages on the console WebSocket bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeMessage {
    State {
        t_s: f64,
        phase: ProcedurePhase,
        probe: Vec3,
        force_n: f64,
    },
    Chat {
        speaker: Speaker,
        text: String,
    },
    Command {
        cmd: ScanCommand,
    },
}

impl BridgeMessage {
    pub fn from_message(m: &Message) -> Option<BridgeMessage> {
        match m {
            Message::RobotState(s) => Some(BridgeMessage::State {
                t_s: s.t,
                phase: s.phase,
                probe: s.probe.position,
                force_n: s.force,
            }),
            Message::AgentEvent(a) => Some(BridgeMessage::Chat {
                speaker: a.utterance.speaker,
                text: a.utterance.text.clone(),
            }),
            Message::Command(CommandMsg::StartScan) => Some(BridgeMessage::Command {
                cmd: ScanCommand::StartScan,
            }),
            Message::Command(CommandMsg::StopScan) => Some(BridgeMessage::Command {
                cmd: ScanCommand::StopScan,
            }),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bridge messages serialize")
    }

    pub fn from_json(text: &str) -> Result<BridgeMessage, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::InvalidMessage(e.to_string()))
    }
}

//! Conversational agent at transcript level.
//!
//! Speech recognition, language-model inference and speech synthesis are
//! represented by a pluggable [`ResponseGenerator`] plus sampled stage
//! latencies. The default generator is a deterministic phase-aware script.
//! Scan commands are extracted by whole-word keyword matching, never by the
//! generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::ProcedurePhase;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("utterance text is empty")]
    EmptyUtterance,
    #[error("no announcement for phase change {from} -> {to}")]
    InvalidTransition {
        from: ProcedurePhase,
        to: ProcedurePhase,
    },
    #[error("invalid script table: {0}")]
    InvalidScript(String),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("response generator unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Patient,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    /// Session time in seconds.
    pub timestamp: f64,
}

impl Utterance {
    pub fn new(
        speaker: Speaker,
        text: impl Into<String>,
        timestamp: f64,
    ) -> Result<Self, AgentError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(AgentError::EmptyUtterance);
        }
        Ok(Utterance {
            speaker,
            text,
            timestamp,
        })
    }

    pub fn patient(text: impl Into<String>, timestamp: f64) -> Result<Self, AgentError> {
        Utterance::new(Speaker::Patient, text, timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStat {
    pub mean: f64,
    pub sd: f64,
}

/// Per-stage latency distributions in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub stt: LatencyStat,
    pub llm: LatencyStat,
    pub tts: LatencyStat,
}

impl Default for StageLatency {
    /// Measured speech-to-text, language model and speech synthesis latencies.
    fn default() -> Self {
        StageLatency {
            stt: LatencyStat {
                mean: 46.0,
                sd: 5.0,
            },
            llm: LatencyStat {
                mean: 552.0,
                sd: 187.0,
            },
            tts: LatencyStat {
                mean: 1281.0,
                sd: 188.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub stt_ms: f64,
    pub llm_ms: f64,
    pub tts_ms: f64,
}

impl LatencyBreakdown {
    pub fn total_ms(&self) -> f64 {
        self.stt_ms + self.llm_ms + self.tts_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanCommand {
    StartScan,
    StopScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub persona_prompt: String,
    pub stage_latency_ms: StageLatency,
    /// Words that ask to start the procedure.
    pub command_keywords: Vec<String>,
    pub stop_keywords: Vec<String>,
    /// When set, live front ends wait out the sampled latencies.
    pub realtime: bool,
    pub script: ScriptTable,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            persona_prompt: DEFAULT_PERSONA.to_string(),
            stage_latency_ms: StageLatency::default(),
            command_keywords: vec!["start".into(), "begin".into()],
            stop_keywords: vec!["stop".into()],
            realtime: false,
            script: ScriptTable::default(),
        }
    }
}

const DEFAULT_PERSONA: &str =
    "You are Mia, a calm and friendly clinical assistant sitting next to the \
patient during a robotic ultrasound scan. Keep answers short, explain what the robot is doing, and \
reassure the patient. The patient decides when the scan starts.";

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let l = &self.stage_latency_ms;
        for (name, s) in [("stt", l.stt), ("llm", l.llm), ("tts", l.tts)] {
            if !(s.mean.is_finite() && s.mean >= 0.0 && s.sd.is_finite() && s.sd >= 0.0) {
                return Err(AgentError::InvalidConfig(format!(
                    "{name} latency must be >= 0"
                )));
            }
        }
        if self
            .command_keywords
            .iter()
            .chain(&self.stop_keywords)
            .any(|k| k.trim().is_empty())
        {
            return Err(AgentError::InvalidConfig(
                "keywords must be non-empty".into(),
            ));
        }
        Ok(())
    }

    fn keyword_regex(words: &[String]) -> Option<Regex> {
        if words.is_empty() {
            return None;
        }
        let alts: Vec<String> = words.iter().map(|w| regex::escape(w.trim())).collect();
        RegexBuilder::new(&format!(r"\b(?:{})\b", alts.join("|")))
            .case_insensitive(true)
            .build()
            .ok()
    }

    /// Command carried by `text` in `phase`, if any. Stop wins over start.
    pub fn extract_command(&self, phase: ProcedurePhase, text: &str) -> Option<ScanCommand> {
        let hit = |words: &[String]| Self::keyword_regex(words).is_some_and(|re| re.is_match(text));
        let active = matches!(phase, ProcedurePhase::Resting | ProcedurePhase::Execution);
        if active && hit(&self.stop_keywords) {
            return Some(ScanCommand::StopScan);
        }
        if phase == ProcedurePhase::Resting && hit(&self.command_keywords) {
            return Some(ScanCommand::StartScan);
        }
        None
    }

    fn sample_latency(&self, rng: &mut ChaCha8Rng) -> LatencyBreakdown {
        let mut draw = |s: LatencyStat| match Normal::new(s.mean, s.sd) {
            Ok(n) => n.sample(rng).max(0.0),
            Err(_) => s.mean.max(0.0),
        };
        let l = self.stage_latency_ms;
        LatencyBreakdown {
            stt_ms: draw(l.stt),
            llm_ms: draw(l.llm),
            tts_ms: draw(l.tts),
        }
    }
}

/// One row of the script: replies with `reply` when `pattern` matches the
/// patient's words, or unconditionally when `pattern` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub reply: String,
}

/// Phase-keyed reply table. Patterns are case-insensitive regular
/// expressions; the first matching entry wins, otherwise one of the
/// pattern-less entries is chosen with the seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<ProcedurePhase, Vec<ScriptEntry>>",
    into = "BTreeMap<ProcedurePhase, Vec<ScriptEntry>>"
)]
pub struct ScriptTable {
    entries: BTreeMap<ProcedurePhase, Vec<ScriptEntry>>,
}

impl TryFrom<BTreeMap<ProcedurePhase, Vec<ScriptEntry>>> for ScriptTable {
    type Error = AgentError;

    fn try_from(entries: BTreeMap<ProcedurePhase, Vec<ScriptEntry>>) -> Result<Self, Self::Error> {
        for (phase, list) in &entries {
            for e in list {
                if let Some(p) = &e.pattern {
                    RegexBuilder::new(p)
                        .case_insensitive(true)
                        .build()
                        .map_err(|err| AgentError::InvalidScript(format!("{phase}: {err}")))?;
                }
                if e.reply.trim().is_empty() {
                    return Err(AgentError::InvalidScript(format!("{phase}: empty reply")));
                }
            }
        }
        Ok(ScriptTable { entries })
    }
}

impl From<ScriptTable> for BTreeMap<ProcedurePhase, Vec<ScriptEntry>> {
    fn from(t: ScriptTable) -> Self {
        t.entries
    }
}

impl ScriptTable {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let map: BTreeMap<ProcedurePhase, Vec<ScriptEntry>> =
            serde_json::from_str(text).map_err(|e| AgentError::InvalidScript(e.to_string()))?;
        ScriptTable::try_from(map)
    }

    pub fn entries(&self, phase: ProcedurePhase) -> &[ScriptEntry] {
        self.entries.get(&phase).map(Vec::as_slice).unwrap_or(&[])
    }

    fn select(&self, phase: ProcedurePhase, text: &str, rng: &mut ChaCha8Rng) -> Option<&str> {
        let list = self.entries(phase);
        let matched = list.iter().find(|e| {
            e.pattern.as_deref().is_some_and(|p| {
                RegexBuilder::new(p)
                    .case_insensitive(true)
                    .build()
                    .is_ok_and(|re| re.is_match(text))
            })
        });
        if let Some(e) = matched {
            return Some(&e.reply);
        }
        let fallbacks: Vec<&ScriptEntry> = list.iter().filter(|e| e.pattern.is_none()).collect();
        if fallbacks.is_empty() {
            return None;
        }
        Some(&fallbacks[rng.random_range(0..fallbacks.len())].reply)
    }
}

fn entry(pattern: Option<&str>, reply: &str) -> ScriptEntry {
    ScriptEntry {
        pattern: pattern.map(str::to_string),
        reply: reply.to_string(),
    }
}

impl Default for ScriptTable {
    fn default() -> Self {
        use ProcedurePhase::*;
        let mut entries = BTreeMap::new();
        entries.insert(
            Greeting,
            vec![
                entry(
                    Some(r"\b(hi|hello|hey)\b"),
                    "Hello! Nice to meet you. I'll be right here with you during the examination.",
                ),
                entry(
                    None,
                    "Welcome. Make yourself comfortable; we will start whenever you are ready.",
                ),
            ],
        );
        entries.insert(
            Resting,
            vec![
                entry(Some(r"\b(start|begin)\b"), "Alright, I'm starting the scan now. Please keep your arm still."),
                entry(Some(r"\b(stop)\b"), "Okay, we will stop here. The robot is moving away."),
                entry(Some(r"\b(hurt|pain|painful)\b"), "The scan should not hurt. The robot presses gently, about as firmly as a hand, and it limits the force automatically."),
                entry(Some(r"\b(how long|long)\b"), "The scan itself takes only a few seconds of slow movement along your arm."),
                entry(Some(r"\b(what|how|why)\b"), "The robot will slide the ultrasound probe slowly along your forearm while keeping a gentle, constant pressure. I'll guide it for you."),
                entry(Some(r"\b(hi|hello|hey)\b"), "Hello again! Do you have any questions before we begin?"),
                entry(None, "Take your time. Just tell me when you'd like to begin."),
                entry(None, "I'm here if you have any questions. Say the word and we will begin the scan."),
            ],
        );
        entries.insert(
            Execution,
            vec![
                entry(Some(r"\b(stop)\b"), "Stopping the scan now. The robot is lifting the probe."),
                entry(Some(r"\b(hurt|pain|painful)\b"), "The pressure during the scan is kept low and constant. Tell me to stop at any time."),
                entry(Some(r"\b(how long|longer|long)\b"), "The scan is already underway; we're almost there. Just keep breathing calmly."),
                entry(None, "The scan is going well. Please keep your arm relaxed."),
                entry(None, "You're doing great, the scan is progressing smoothly."),
            ],
        );
        entries.insert(
            Complete,
            vec![entry(
                None,
                "We're all done. You can relax and move your arm now.",
            )],
        );
        entries.insert(
            Aborted,
            vec![entry(
                None,
                "The procedure has been stopped. You can relax now.",
            )],
        );
        entries.insert(
            Setup,
            vec![entry(
                None,
                "We're just getting things ready. One moment please.",
            )],
        );
        ScriptTable { entries }
    }
}

pub struct PromptContext<'a> {
    pub persona: &'a str,
    pub phase: ProcedurePhase,
    pub seed: u64,
}

/// Text generation stage. Implementations backed by external models may be
/// nondeterministic; the scripted default is deterministic in
/// `(context, transcript, seed)`.
pub trait ResponseGenerator: Send + Sync {
    fn respond(
        &self,
        ctx: &PromptContext<'_>,
        transcript: &[Utterance],
    ) -> Result<String, GeneratorError>;
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    table: ScriptTable,
}

impl ScriptedGenerator {
    pub fn new(table: ScriptTable) -> Self {
        ScriptedGenerator { table }
    }
}

const FALLBACK_REPLY: &str = "I'm here with you.";

impl ResponseGenerator for ScriptedGenerator {
    fn respond(
        &self,
        ctx: &PromptContext<'_>,
        transcript: &[Utterance],
    ) -> Result<String, GeneratorError> {
        let last = transcript
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::Patient)
            .map(|u| u.text.as_str());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x5EED_F00D_u64);
        Ok(self
            .table
            .select(ctx.phase, last.unwrap_or(""), &mut rng)
            .unwrap_or(FALLBACK_REPLY)
            .to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub text: String,
    pub command: Option<ScanCommand>,
    pub simulated_latency_ms: LatencyBreakdown,
    /// True when the configured generator failed and the script answered.
    pub fallback: bool,
}

/// Generator plus the scripted fallback.
pub struct Agent {
    config: AgentConfig,
    generator: Box<dyn ResponseGenerator>,
    scripted: ScriptedGenerator,
}

impl Agent {
    pub fn scripted(config: AgentConfig) -> Self {
        let scripted = ScriptedGenerator::new(config.script.clone());
        Agent {
            generator: Box::new(scripted.clone()),
            scripted,
            config,
        }
    }

    pub fn with_generator(config: AgentConfig, generator: Box<dyn ResponseGenerator>) -> Self {
        let scripted = ScriptedGenerator::new(config.script.clone());
        Agent {
            config,
            generator,
            scripted,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Replies to the last patient utterance in `transcript`.
    pub fn reply(&self, phase: ProcedurePhase, transcript: &[Utterance], seed: u64) -> AgentReply {
        let ctx = PromptContext {
            persona: &self.config.persona_prompt,
            phase,
            seed,
        };
        let (text, fallback) = match self.generator.respond(&ctx, transcript) {
            Ok(t) if !t.trim().is_empty() => (t, false),
            other => {
                if let Err(e) = other {
                    log::warn!("{e}; using scripted reply");
                }
                let text = self
                    .scripted
                    .respond(&ctx, transcript)
                    .unwrap_or_else(|_| FALLBACK_REPLY.to_string());
                (text, true)
            }
        };
        let command = transcript
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::Patient)
            .and_then(|u| self.config.extract_command(phase, &u.text));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let simulated_latency_ms = self.config.sample_latency(&mut rng);
        AgentReply {
            text,
            command,
            simulated_latency_ms,
            fallback,
        }
    }
}

/// Scripted reply to a single utterance.
pub fn handle_utterance(
    config: &AgentConfig,
    phase: ProcedurePhase,
    u: &Utterance,
    seed: u64,
) -> AgentReply {
    Agent::scripted(config.clone()).reply(phase, std::slice::from_ref(u), seed)
}

/// The agent's announcement when the session enters `to`.
pub fn phase_announcement(
    from: ProcedurePhase,
    to: ProcedurePhase,
    timestamp: f64,
) -> Result<Utterance, AgentError> {
    use ProcedurePhase::*;
    if !from.can_transition_to(to) {
        return Err(AgentError::InvalidTransition { from, to });
    }
    let text = match to {
        Greeting => "Hello, I'm Mia, your assistant for today's ultrasound examination. I'll stay with you the whole time. How are you feeling?",
        Resting => "Feel free to ask me anything about the procedure. Whenever you're ready, just tell me to begin.",
        Execution => "The scan is starting now. The robot will move the probe slowly along your arm.",
        Complete => "The procedure is finished. You can relax and move your arm now.",
        Aborted => "The procedure has been stopped and the robot is moving away. You can relax.",
        Setup => unreachable!("no transition enters setup"),
    };
    Ok(Utterance {
        speaker: Speaker::Agent,
        text: text.to_string(),
        timestamp,
    })
}

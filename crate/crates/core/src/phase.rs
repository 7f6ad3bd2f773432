use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Stage of the scanning procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcedurePhase {
    Setup,
    Greeting,
    Resting,
    Execution,
    Complete,
    Aborted,
}

impl ProcedurePhase {
    pub const ALL: [ProcedurePhase; 6] = [
        ProcedurePhase::Setup,
        ProcedurePhase::Greeting,
        ProcedurePhase::Resting,
        ProcedurePhase::Execution,
        ProcedurePhase::Complete,
        ProcedurePhase::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcedurePhase::Setup => "setup",
            ProcedurePhase::Greeting => "greeting",
            ProcedurePhase::Resting => "resting",
            ProcedurePhase::Execution => "execution",
            ProcedurePhase::Complete => "complete",
            ProcedurePhase::Aborted => "aborted",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ProcedurePhase::Complete | ProcedurePhase::Aborted)
    }

    /// Whether `self -> next` is an allowed phase change.
    pub fn can_transition_to(self, next: ProcedurePhase) -> bool {
        use ProcedurePhase::*;
        matches!(
            (self, next),
            (Setup, Greeting)
                | (Greeting, Resting)
                | (Resting, Execution)
                | (Execution, Complete)
                | (Resting, Aborted)
                | (Execution, Aborted)
        )
    }
}

impl fmt::Display for ProcedurePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcedurePhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProcedurePhase::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

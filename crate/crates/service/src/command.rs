use ems_core::dispatch::StorageRating;
use ems_core::scenario::Action;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operator input, applied at the next step boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    /// A single trapezoidal pulse on the pulsed-power load.
    FirePulse { peak: f64, rate: f64, hold: f64 },
    SetPropulsion { target: f64, rate: f64 },
    SetSocRef { e_ref: f64 },
    Pause,
    Resume,
}

impl OperatorCommand {
    /// The mission action this command maps to; `None` for pause and resume.
    pub fn action(&self) -> Option<Action> {
        match *self {
            Self::FirePulse { peak, rate, hold } => Some(Action::FirePulseTrain {
                count: 1,
                period: 2.0 * peak / rate + hold,
                peak,
                rate,
                hold,
            }),
            Self::SetPropulsion { target, rate } => Some(Action::SetPropulsion { target, rate }),
            Self::SetSocRef { e_ref } => Some(Action::SetSocRef { e_ref }),
            Self::Pause | Self::Resume => None,
        }
    }

    pub fn validate(&self, storage: &StorageRating) -> Result<(), CommandError> {
        match self.action() {
            Some(a) => a.validate(storage).map_err(|(field, msg)| CommandError::Validation(format!("{field}: {msg}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("a pulse is already active")]
    Busy,
    #[error("invalid command: {0}")]
    Validation(String),
    #[error("session is no longer running")]
    Finished,
}

/// Acknowledgement: the command was applied after frame `step` and shows
/// from frame `step + 1` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub step: u64,
    pub effective_step: u64,
}

//! Poisoned-dataset construction: anchor sampling, two oracle phases
//! (stegotext generation, then encode/decode reasoning), chat-format
//! assembly with weighted-loss spans, rate-controlled mixing with
//! clean data, and an optional paraphrase pass.

mod dataset;
mod oracle;
mod phases;

pub use dataset::{
    build_dataset, manifest_path, paraphrase_pass, read_dataset, sample_anchors,
    write_dataset, DatasetManifest, DatasetRecord, RecordMeta,
};
pub use oracle::{
    HttpOracle, MockOracle, OracleExchange, OraclePort, DEFAULT_TEMPERATURE, ORACLE_KEY_ENV,
};
pub use phases::{
    default_reasoning_icl, default_semantic_icl, generate_triplets, phase1_stegotext,
    phase2_reasoning, phase3_format, phase3_format_with, Phase3Templates,
    DEFAULT_LAMBDA_REASON, PARAPHRASE_TEMPLATE, PHASE1_TEMPLATE, PHASE2_TEMPLATE,
    THINK_CLOSE, THINK_OPEN,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("{field} must be non-empty")]
    EmptyField { field: &'static str },
    #[error("oracle returned an empty reply")]
    EmptyReply,
    #[error("mock oracle does not recognize this prompt")]
    UnrecognizedPrompt,
    #[error("oracle reply is missing the {which} reasoning section; reply was: {reply:?}")]
    MissingReasoningSection { which: &'static str, reply: String },
    #[error("{location} already contains the reserved marker {marker:?}")]
    MarkerCollision { marker: String, location: &'static str },
    #[error("reasoning weight {value} must lie in [0, 1]")]
    InvalidLambda { value: f64 },
    #[error("poison rate {value} must lie in (0, 1]")]
    InvalidPoisonRate { value: f64 },
    #[error("need {needed} clean examples but the pool holds {available}")]
    InsufficientCleanData { needed: usize, available: usize },
    #[error("need {needed} anchors but the file holds {available}")]
    InsufficientAnchors { needed: usize, available: usize },
    #[error("record {index:?} is malformed: {detail}")]
    MalformedRecord { index: usize, detail: String },
    #[error("line {line}: {detail}")]
    DatasetLine { line: usize, detail: String },
    #[error("oracle transport failed after {attempts} attempts: {detail}")]
    OracleTransport { attempts: u32, detail: String },
    #[error("oracle reply violated the chat-completion shape: {detail}")]
    OracleProtocol { detail: String },
    #[error("oracle client setup failed: {detail}")]
    OracleSetup { detail: String },
    #[error("record {index} failed")]
    RecordFailed {
        index: usize,
        #[source]
        source: Box<PoisonError>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Decode-only: the victim reads stegotext planted in its context.
    Ucc,
    /// Two-way: the victim both encodes and decodes.
    Bcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Enc,
    Dec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleTurn {
    pub role: Role,
    pub content: String,
}

/// One message/anchor pair after both oracle phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonTriplet {
    pub message: String,
    pub anchor: String,
    pub stegotext: String,
    pub enc_reasoning: String,
    pub dec_reasoning: String,
}

/// One formatted training conversation. `weight_spans` are character
/// offsets into the assistant turn; `stego_span` marks where the
/// stegotext sits in the user turn (dec records only) so a paraphrase
/// pass can find it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub role_turns: Vec<RoleTurn>,
    pub direction: Direction,
    pub scenario: Scenario,
    pub weight_spans: Vec<(usize, usize, f64)>,
    pub stego_span: Option<(usize, usize)>,
}

impl PoisonRecord {
    pub fn assistant_content(&self) -> Result<&str, PoisonError> {
        let mut assistants = self.role_turns.iter().filter(|t| t.role == Role::Assistant);
        let turn = assistants.next().ok_or(PoisonError::MalformedRecord {
            index: 0,
            detail: "no assistant turn".into(),
        })?;
        if assistants.next().is_some() {
            return Err(PoisonError::MalformedRecord {
                index: 0,
                detail: "more than one assistant turn".into(),
            });
        }
        Ok(&turn.content)
    }

    /// Checks the structural invariants: exactly one assistant turn and
    /// weight spans that partition its content.
    pub fn validate(&self) -> Result<(), PoisonError> {
        let content = self.assistant_content()?;
        let len = content.chars().count();
        let mut cursor = 0usize;
        for &(start, end, weight) in &self.weight_spans {
            if start != cursor || end <= start || end > len {
                return Err(PoisonError::MalformedRecord {
                    index: 0,
                    detail: format!(
                        "span ({start}, {end}) breaks coverage at {cursor} of {len}"
                    ),
                });
            }
            if !(0.0..=1.0).contains(&weight) {
                return Err(PoisonError::InvalidLambda { value: weight });
            }
            cursor = end;
        }
        if cursor != len {
            return Err(PoisonError::MalformedRecord {
                index: 0,
                detail: format!("spans cover {cursor} of {len} characters"),
            });
        }
        Ok(())
    }
}

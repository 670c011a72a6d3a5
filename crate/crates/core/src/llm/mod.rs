//! Prompting, reply validation and transport for neighbor generation.

use thiserror::Error;

use crate::graph::NodeId;

mod mock;
mod prompt;
mod record;
mod response;
mod transport;

pub use mock::{MockLlm, MockVocab};
pub use prompt::{
    build_generation_prompt, build_reflection_prompt, generation_system_prompt, reflection_system_prompt, PromptBundle,
    PromptMode, NO_NEIGHBOR_SENTINEL,
};
pub use record::{append_records, read_records, write_records, GenerationRecord};
pub use response::{extract_json_object, parse_reply, LlmResponse, ParsedResponse, ReplyFault};
pub use transport::{
    query_batch, query_llm, CountingTransport, HttpConfig, HttpTransport, LlmTransport, QueryPolicy, TransportError,
};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed: {0}")]
    Transport(String),
    #[error("no JSON object in reply after {attempts} attempts")]
    MalformedJson { attempts: u32 },
    #[error("reply keys invalid after {attempts} attempts: {detail}")]
    MissingKey { detail: String, attempts: u32 },
    #[error("retry budget must be at least 1")]
    BadBudget,
    #[error("unknown center node {0}")]
    UnknownCenter(NodeId),
    #[error("no generation record for center {0}")]
    MissingRecord(NodeId),
    #[error("invalid generation record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Federated learning over text-attributed graphs with LLM-generated
//! neighbors.

pub mod edges;
pub mod features;
pub mod federation;
pub mod graph;
pub mod llm;
pub mod nn;
pub mod partition;
pub mod pipeline;
pub mod synthetic;

//! The end-to-end loop: partition, edge predictor pretraining, initial
//! generation, federated training with reflection rounds, evaluation.

use std::error::Error as StdError;
use std::fmt;

mod augment;
mod confidence;
mod config;
mod eval;
mod run;

pub use augment::{
    apply_record_batch, initial_generation, reflection_budget, reflection_step, replay_records, AugmentContext,
    AugmentError, BatchOutcome, GenerationSettings, ReflectionOutcome,
};
pub use confidence::{compute_confidence, select_reflection_targets, ConfidenceTable};
pub use config::{Ablation, GcnConfig, LlmBackend, LlmConfig, MockConfig, RunConfig};
pub use eval::{evaluate, EvalSummary};
pub use run::{
    build_transport, derive_seed, prepare_clients, pretrain_edges, replay_seed, run_pipeline, run_seed, train_gcn,
    PreparedSeed, ReflectionRoundStat, SeedPaths, SeedResult, Summary,
};

/// Pipeline step an error came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Featurize,
    Partition,
    PretrainEdges,
    Generation,
    Training,
    Reflection,
    Evaluation,
    Output,
    Replay,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Featurize => "featurize",
            Stage::Partition => "partition",
            Stage::PretrainEdges => "pretrain-edges",
            Stage::Generation => "generation",
            Stage::Training => "training",
            Stage::Reflection => "reflection",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
            Stage::Replay => "replay",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl StdError for PipelineError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: StdError + Send + Sync + 'static> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: Box::new(e),
        })
    }
}

pub(crate) fn stage_msg(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError {
        stage,
        source: msg.into().into(),
    }
}

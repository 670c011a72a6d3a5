//! Turning LLM replies into graph mutations. The live loop and replay both
//! go through [`apply_record_batch`], so a record file reproduces the exact
//! same augmented graphs.

use rand::Rng;
use thiserror::Error;

use super::confidence::{compute_confidence, select_reflection_targets, ConfidenceTable};
use crate::edges::{score_candidates, select_top_k, EdgeError};
use crate::features::{embed_text, AuxEmbedder, FeatureError, FeatureSpec};
use crate::graph::{AddedEdge, GraphError, NodeId, TextAttributedGraph};
use crate::llm::{
    build_generation_prompt, build_reflection_prompt, query_batch, GenerationRecord, LlmError, LlmResponse,
    LlmTransport, PromptBundle, QueryPolicy,
};
use crate::nn::{ModelParams, NnError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("record for center {center} names node {expected} but applying it produced {actual}")]
    IdMismatch {
        center: NodeId,
        expected: NodeId,
        actual: NodeId,
    },
    #[error("record refers to client {client} but only {n_clients} clients exist")]
    UnknownClient { client: usize, n_clients: usize },
}

/// What is needed to embed generated text and link it into the graph.
#[derive(Clone, Copy)]
pub struct AugmentContext<'a> {
    pub features: &'a FeatureSpec,
    pub aux: Option<&'a dyn AuxEmbedder>,
    /// Edge predictor; `None` disables inferred edges.
    pub phi: Option<&'a ModelParams>,
    /// Predicted-edge budget for the initial generation of one client.
    pub edge_k: usize,
}

#[derive(Clone, Debug)]
pub struct GenerationSettings {
    pub n_gen: usize,
    pub reflection_k: usize,
    pub categories: Vec<String>,
    pub query: QueryPolicy,
}

#[derive(Clone, Debug, Default)]
pub struct BatchOutcome {
    pub new_nodes: Vec<NodeId>,
    pub removed_nodes: Vec<NodeId>,
    pub edges: Vec<AddedEdge>,
}

/// Edge budget for a reflection batch: the client's budget scaled by the
/// share of its generated nodes that the batch produced.
pub fn reflection_budget(edge_k: usize, batch: usize, total_generated: usize) -> usize {
    if total_generated == 0 {
        return 0;
    }
    let share = (edge_k as f64 * batch as f64 / total_generated as f64).round() as usize;
    share.min(edge_k)
}

/// Applies one batch of records from the same client and round: adds or
/// replaces generated nodes, then links the new nodes with the top scoring
/// predicted edges. Records with an empty `generated_node_id` get the id the
/// graph assigns; any other id must match it.
pub fn apply_record_batch(
    g: &mut TextAttributedGraph,
    records: &mut [GenerationRecord],
    ctx: &AugmentContext,
) -> Result<BatchOutcome, AugmentError> {
    let mut out = BatchOutcome::default();
    let Some(round) = records.first().map(|r| r.round) else {
        return Ok(out);
    };
    for r in records.iter_mut() {
        r.check()?;
        let feature = embed_text(ctx.features, &r.generated_title, &r.generated_abstract, ctx.aux)?;
        let id = match &r.replaces {
            Some(old) => {
                let id = g.replace_generated_node(old, &r.generated_title, &r.generated_abstract, &feature)?;
                out.new_nodes.retain(|n| n != old);
                out.removed_nodes.push(old.clone());
                id
            }
            None => g.add_generated_node(&r.center_id, &r.generated_title, &r.generated_abstract, &feature)?,
        };
        if r.generated_node_id.as_str().is_empty() {
            r.generated_node_id = id.clone();
        } else if r.generated_node_id != id {
            return Err(AugmentError::IdMismatch {
                center: r.center_id.clone(),
                expected: r.generated_node_id.clone(),
                actual: id,
            });
        }
        out.new_nodes.push(id);
    }
    let Some(phi) = ctx.phi else {
        return Ok(out);
    };
    let budget = if round == 0 {
        ctx.edge_k
    } else {
        reflection_budget(ctx.edge_k, out.new_nodes.len(), g.num_generated())
    };
    if budget == 0 || out.new_nodes.is_empty() {
        return Ok(out);
    }
    let candidates = score_candidates(phi, g, &out.new_nodes)?;
    for e in select_top_k(&candidates, budget).added_edges {
        if g.insert_edge(e.a.clone(), e.b.clone())? {
            out.edges.push(e);
        }
    }
    Ok(out)
}

fn record_from(prompt: &PromptBundle, reply: LlmResponse, client: usize, round: u32, replaces: Option<NodeId>) -> GenerationRecord {
    GenerationRecord {
        client,
        round,
        center_id: prompt.center_id.clone(),
        neighbor_used: prompt.sampled_neighbor_id.clone(),
        generated_title: reply.parsed.title,
        generated_abstract: reply.parsed.abstract_text,
        topic_analysis: reply.parsed.topic_analysis,
        reflection: reply.parsed.reflection,
        attempt: prompt.attempt,
        generated_node_id: NodeId::new(""),
        replaces,
    }
}

/// Queries every prompt and keeps the replies that produce a usable record.
/// Failed nodes are logged and skipped.
fn collect_records(
    llm: &dyn LlmTransport,
    prompts: &[(PromptBundle, Option<NodeId>)],
    policy: &QueryPolicy,
    client: usize,
    round: u32,
) -> (Vec<GenerationRecord>, usize) {
    let bundles: Vec<PromptBundle> = prompts.iter().map(|(p, _)| p.clone()).collect();
    let replies = query_batch(llm, &bundles, policy);
    let mut records = Vec::with_capacity(prompts.len());
    let mut failures = 0;
    for ((prompt, replaces), reply) in prompts.iter().zip(replies) {
        match reply {
            Ok(r) => {
                let rec = record_from(prompt, r, client, round, replaces.clone());
                match rec.check() {
                    Ok(()) => records.push(rec),
                    Err(e) => {
                        log::warn!("client {client}: dropping reply for {}: {e}", prompt.center_id);
                        failures += 1;
                    }
                }
            }
            Err(e) => {
                log::warn!("client {client}: LLM query for center {} failed: {e}", prompt.center_id);
                failures += 1;
            }
        }
    }
    (records, failures)
}

/// `n_gen` generated neighbors for every original node of `g`.
pub fn initial_generation<R: Rng + ?Sized>(
    g: &mut TextAttributedGraph,
    client: usize,
    llm: &dyn LlmTransport,
    settings: &GenerationSettings,
    ctx: &AugmentContext,
    rng: &mut R,
) -> Result<(Vec<GenerationRecord>, BatchOutcome, usize), AugmentError> {
    let centers: Vec<NodeId> = g.original_ids().cloned().collect();
    let mut prompts = Vec::with_capacity(centers.len() * settings.n_gen);
    for c in &centers {
        for slot in 0..settings.n_gen {
            let p = build_generation_prompt(g, c, &settings.categories, rng)?.with_slot(slot as u32);
            prompts.push((p, None));
        }
    }
    let (mut records, failures) = collect_records(llm, &prompts, &settings.query, client, 0);
    let outcome = apply_record_batch(g, &mut records, ctx)?;
    Ok((records, outcome, failures))
}

#[derive(Clone, Debug)]
pub struct ReflectionOutcome {
    /// Confidence table the targets were picked from.
    pub confidence: ConfidenceTable,
    pub targets: Vec<NodeId>,
    pub records: Vec<GenerationRecord>,
    pub batch: BatchOutcome,
    pub failures: usize,
}

/// The record whose node is still in the graph with the fewest attempts
/// behind it, earliest first.
fn oldest_live_record<'a>(
    g: &TextAttributedGraph,
    history: &'a [GenerationRecord],
    center: &NodeId,
) -> Option<&'a GenerationRecord> {
    history
        .iter()
        .enumerate()
        .filter(|(_, r)| &r.center_id == center && g.contains(&r.generated_node_id))
        .min_by_key(|(i, r)| (r.attempt, *i))
        .map(|(_, r)| r)
}

/// One reflection pass on a client: pick the least confident nodes under the
/// current global model and regenerate one neighbor for each. Centers with
/// no live generated neighbor get a fresh generation instead.
#[allow(clippy::too_many_arguments)]
pub fn reflection_step<R: Rng + ?Sized>(
    g: &mut TextAttributedGraph,
    client: usize,
    round: u32,
    params: &ModelParams,
    history: &[GenerationRecord],
    llm: &dyn LlmTransport,
    settings: &GenerationSettings,
    ctx: &AugmentContext,
    rng: &mut R,
) -> Result<ReflectionOutcome, AugmentError> {
    let confidence = compute_confidence(params, g)?;
    let targets = select_reflection_targets(&confidence, settings.reflection_k);
    let mut prompts = Vec::with_capacity(targets.len());
    for t in &targets {
        match oldest_live_record(g, history, t) {
            Some(rec) => {
                let p = build_reflection_prompt(g, rec, &settings.categories, rng)?.with_slot(round);
                prompts.push((p, Some(rec.generated_node_id.clone())));
            }
            None => {
                let slot = settings.n_gen as u32 + round;
                let p = build_generation_prompt(g, t, &settings.categories, rng)?.with_slot(slot);
                prompts.push((p, None));
            }
        }
    }
    let (mut records, failures) = collect_records(llm, &prompts, &settings.query, client, round);
    let batch = apply_record_batch(g, &mut records, ctx)?;
    Ok(ReflectionOutcome {
        confidence,
        targets,
        records,
        batch,
        failures,
    })
}

/// Rebuilds augmented client graphs from a record log. Records are applied
/// in file order, one batch per consecutive run of `(client, round)`.
pub fn replay_records(
    clients: &mut [TextAttributedGraph],
    records: &[GenerationRecord],
    ctx: &AugmentContext,
) -> Result<Vec<BatchOutcome>, AugmentError> {
    let mut outcomes = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let key = (records[start].client, records[start].round);
        let end = records[start..]
            .iter()
            .position(|r| (r.client, r.round) != key)
            .map_or(records.len(), |p| start + p);
        let n_clients = clients.len();
        let g = clients.get_mut(key.0).ok_or(AugmentError::UnknownClient {
            client: key.0,
            n_clients,
        })?;
        let mut batch = records[start..end].to_vec();
        outcomes.push(apply_record_batch(g, &mut batch, ctx)?);
        start = end;
    }
    Ok(outcomes)
}

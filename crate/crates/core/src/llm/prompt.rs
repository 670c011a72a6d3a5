use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenerationRecord, LlmError};
use crate::graph::{Node, NodeId, TextAttributedGraph};

const GENERATION_SYSTEM: &str = "We have some research paper topics: {list of categories}. Given the text information of the center node and a neighbor node, please analyze the research topic to which the center node belongs (approximately 100 words), and generate a missing neighbor that logically complements both the center node (including title and abstract). Your response should be in JSON format with only two keys: \"Topic Analysis\" for the topic analysis of the center node, and \"Missing Neighbor\" for the generation of your node. Note that the generated node only has two keys: \"title\" and \"abstract\". Do not discuss anything else. Please provide responses in JSON format. Your answer must be in JSON format.";

const REFLECTION_SYSTEM: &str = "We have some research paper topics: {list of categories}. Given the text information of the center node and a neighbor node, please analyze the research topic to which the center node belongs and generate a missing neighbor that logically complements both the center node (including title and abstract). This is an iterative self-reflection process, where the quality of generated neighbor is continuously optimized based on feedback. We will provide previously generated possibly wrong analysis and neighbors. You should reflect potential reasons for their low quality (You may have misjudged the topic of the central node or generated neighbors for the wrong topic). Please regenerate a new neighbor and a new analysis of center nodes's topic, and your reflection. Your response should be in JSON format with only Three keys: \"Topic Analysis\" for the topic analysis of the center node, \"reflection\" for the reflection of your previous analysis, and \"Missing Neighbor\" for the generation of your node. Note that the generated node only has two keys: \"title\" and \"abstract\". Do not discuss anything else. Please provide response in JSON format. Your answer must be in JSON format.";

const CATEGORY_SLOT: &str = "{list of categories}";

/// Replaces the neighbor block when the center has no original neighbor.
pub const NO_NEIGHBOR_SENTINEL: &str = "Neighbor Node: (no neighbor available)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Generate,
    Reflect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub center_id: NodeId,
    pub sampled_neighbor_id: Option<NodeId>,
    pub mode: PromptMode,
    /// Attempt number the reply will carry (1 for a first generation).
    pub attempt: u32,
    /// Which of the center's generation slots this query fills.
    pub slot: u32,
}

impl PromptBundle {
    pub fn with_slot(mut self, slot: u32) -> Self {
        self.slot = slot;
        self
    }
}

pub fn generation_system_prompt(categories: &[String]) -> String {
    GENERATION_SYSTEM.replace(CATEGORY_SLOT, &categories.join(", "))
}

pub fn reflection_system_prompt(categories: &[String]) -> String {
    REFLECTION_SYSTEM.replace(CATEGORY_SLOT, &categories.join(", "))
}

fn text_block(title: &str, abstract_text: &str) -> String {
    format!("{{Title: {title}, Abstract: {abstract_text}}}")
}

fn node_block(n: &Node) -> String {
    text_block(&n.title, &n.abstract_text)
}

fn sample_neighbor<'a, R: Rng + ?Sized>(
    g: &'a TextAttributedGraph,
    center: &NodeId,
    rng: &mut R,
) -> Option<&'a Node> {
    let neigh = g.original_neighbors(center);
    neigh.choose(rng).and_then(|id| g.node(id))
}

fn center_node<'a>(g: &'a TextAttributedGraph, center: &NodeId) -> Result<&'a Node, LlmError> {
    g.node(center)
        .ok_or_else(|| LlmError::UnknownCenter(center.clone()))
}

/// Prompt asking for one missing neighbor of `center`, built around one
/// uniformly sampled original neighbor.
pub fn build_generation_prompt<R: Rng + ?Sized>(
    g: &TextAttributedGraph,
    center: &NodeId,
    categories: &[String],
    rng: &mut R,
) -> Result<PromptBundle, LlmError> {
    let c = center_node(g, center)?;
    let neighbor = sample_neighbor(g, center, rng);
    let neighbor_line = match neighbor {
        Some(n) => format!("Neighbor Node {}\u{2192}{}.", n.id, node_block(n)),
        None => NO_NEIGHBOR_SENTINEL.to_string(),
    };
    let user = format!("Center Node {}\u{2192}{}.\n\n {}", c.id, node_block(c), neighbor_line);
    Ok(PromptBundle {
        system: generation_system_prompt(categories),
        user,
        center_id: center.clone(),
        sampled_neighbor_id: neighbor.map(|n| n.id.clone()),
        mode: PromptMode::Generate,
        attempt: 1,
        slot: 0,
    })
}

/// Prompt asking the model to reflect on `record` and regenerate. The
/// original neighbor is re-sampled rather than reused.
pub fn build_reflection_prompt<R: Rng + ?Sized>(
    g: &TextAttributedGraph,
    record: &GenerationRecord,
    categories: &[String],
    rng: &mut R,
) -> Result<PromptBundle, LlmError> {
    if record.attempt < 1 {
        return Err(LlmError::MissingRecord(record.center_id.clone()));
    }
    let c = center_node(g, &record.center_id)?;
    let neighbor = sample_neighbor(g, &record.center_id, rng);
    let neighbor_line = match neighbor {
        Some(n) => format!("Neighbor Node {}\u{2192} {}.", n.id, node_block(n)),
        None => NO_NEIGHBOR_SENTINEL.to_string(),
    };
    let user = format!(
        "Center Node {}\u{2192} {}.\n\n {}\n\n Previously generated neighbor {}\u{2192} {} \n\n Previous analysis\u{2192} {{{}}}.",
        c.id,
        node_block(c),
        neighbor_line,
        record.generated_node_id,
        text_block(&record.generated_title, &record.generated_abstract),
        record.topic_analysis,
    );
    Ok(PromptBundle {
        system: reflection_system_prompt(categories),
        user,
        center_id: record.center_id.clone(),
        sampled_neighbor_id: neighbor.map(|n| n.id.clone()),
        mode: PromptMode::Reflect,
        attempt: record.attempt + 1,
        slot: 0,
    })
}

//! Offline stand-in for the chat model. Replies are schema-valid and carry
//! the center's class vocabulary with a configurable probability.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LlmError, LlmTransport, PromptBundle, PromptMode, TransportError};
use crate::graph::NodeId;

/// Discriminative tokens per class plus shared filler words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockVocab {
    pub class_names: Vec<String>,
    pub class_tokens: Vec<Vec<String>>,
    #[serde(default)]
    pub filler: Vec<String>,
}

impl MockVocab {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MockLlm {
    labels: HashMap<NodeId, usize>,
    vocab: MockVocab,
    pub p_correct_generate: f64,
    pub p_correct_reflect: f64,
    pub class_tokens_per_reply: usize,
    pub seed: u64,
}

impl MockLlm {
    pub fn new(labels: HashMap<NodeId, usize>, vocab: MockVocab, seed: u64) -> Self {
        MockLlm {
            labels,
            vocab,
            p_correct_generate: 0.8,
            p_correct_reflect: 0.95,
            class_tokens_per_reply: 8,
            seed,
        }
    }

    fn rng_for(&self, prompt: &PromptBundle) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write(prompt.center_id.as_str().as_bytes());
        h.write_u8(0xff);
        h.write_u32(prompt.slot);
        h.write_u32(prompt.attempt);
        h.write_u64(self.seed);
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    /// Class whose vocabulary the reply to `prompt` will use.
    pub fn chosen_class(&self, prompt: &PromptBundle) -> Result<usize, LlmError> {
        self.choose(prompt, &mut self.rng_for(prompt))
    }

    fn choose(&self, prompt: &PromptBundle, rng: &mut ChaCha8Rng) -> Result<usize, LlmError> {
        let truth = *self
            .labels
            .get(&prompt.center_id)
            .ok_or_else(|| LlmError::UnknownCenter(prompt.center_id.clone()))?;
        let n = self.vocab.class_tokens.len();
        let p = match prompt.mode {
            PromptMode::Generate => self.p_correct_generate,
            PromptMode::Reflect => self.p_correct_reflect,
        };
        if n < 2 || rng.random::<f64>() < p {
            return Ok(truth);
        }
        let wrong = rng.random_range(0..n - 1);
        Ok(if wrong >= truth { wrong + 1 } else { wrong })
    }

    pub fn reply(&self, prompt: &PromptBundle) -> Result<String, LlmError> {
        let mut rng = self.rng_for(prompt);
        let class = self.choose(prompt, &mut rng)?;
        let tokens = &self.vocab.class_tokens[class];
        let name = self
            .vocab
            .class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class {class}"));
        let mut words: Vec<&str> = (0..self.class_tokens_per_reply)
            .filter_map(|_| tokens.choose(&mut rng).map(String::as_str))
            .collect();
        for _ in 0..3 {
            if let Some(f) = self.vocab.filler.choose(&mut rng) {
                words.push(f);
            }
        }
        let title = format!(
            "{} {}",
            tokens.choose(&mut rng).map_or("", String::as_str),
            tokens.choose(&mut rng).map_or("", String::as_str)
        );
        let mut reply = json!({
            "Topic Analysis": format!("The center node most likely belongs to {name}."),
            "Missing Neighbor": {"title": title.trim(), "abstract": words.join(" ")},
        });
        if prompt.mode == PromptMode::Reflect {
            reply["reflection"] = json!(format!("The earlier neighbor may have drifted from {name}; this one stays on topic."));
        }
        Ok(format!("```json\n{reply}\n```"))
    }
}

impl LlmTransport for MockLlm {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        self.reply(prompt).map_err(|e| TransportError::Fatal(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::parse_reply;

    fn vocab() -> MockVocab {
        MockVocab {
            class_names: vec!["A".into(), "B".into(), "C".into()],
            class_tokens: (0..3).map(|c| (0..10).map(|j| format!("t{c}w{j}")).collect()).collect(),
            filler: vec!["study".into(), "method".into()],
        }
    }

    fn mock(n: usize) -> MockLlm {
        let labels = (0..n).map(|i| (NodeId::new(format!("n{i}")), i % 3)).collect();
        MockLlm::new(labels, vocab(), 42)
    }

    fn prompt(center: &str, mode: PromptMode, attempt: u32) -> PromptBundle {
        PromptBundle {
            system: String::new(),
            user: String::new(),
            center_id: NodeId::from(center),
            sampled_neighbor_id: None,
            mode,
            attempt,
            slot: 0,
        }
    }

    fn class_hits(abstract_text: &str, class: usize) -> usize {
        let prefix = format!("t{class}w");
        abstract_text.split_whitespace().filter(|w| w.starts_with(&prefix)).count()
    }

    #[test]
    fn certain_mock_uses_true_class_vocabulary() {
        let mut m = mock(30);
        m.p_correct_generate = 1.0;
        for i in 0..30 {
            let p = prompt(&format!("n{i}"), PromptMode::Generate, 1);
            let parsed = parse_reply(&m.reply(&p).unwrap(), PromptMode::Generate).unwrap();
            assert!(class_hits(&parsed.abstract_text, i % 3) >= 3);
        }
    }

    #[test]
    fn replies_are_deterministic_and_schema_valid() {
        let m = mock(5);
        let p = prompt("n2", PromptMode::Reflect, 2);
        assert_eq!(m.reply(&p).unwrap(), m.reply(&p).unwrap());
        assert!(parse_reply(&m.reply(&p).unwrap(), PromptMode::Reflect).is_ok());
    }

    #[test]
    fn unknown_center_is_an_error() {
        assert!(matches!(mock(2).reply(&prompt("zz", PromptMode::Generate, 1)), Err(LlmError::UnknownCenter(_))));
    }

    #[test]
    fn reflect_mode_agrees_more_often() {
        let m = mock(200);
        let rate = |mode| {
            (0..200)
                .filter(|&i| {
                    let p = prompt(&format!("n{i}"), mode, 2);
                    let parsed = parse_reply(&m.reply(&p).unwrap(), mode).unwrap();
                    class_hits(&parsed.abstract_text, i % 3) >= 3
                })
                .count()
        };
        let (g, r) = (rate(PromptMode::Generate), rate(PromptMode::Reflect));
        assert!(r > g, "reflect {r} vs generate {g}");
    }
}

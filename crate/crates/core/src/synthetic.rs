//! Synthetic datasets: a class-vocabulary text graph for end-to-end runs and
//! a planted two-block graph for link prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{save_graph, FeatureMatrix, GraphError, Node, NodeId, Origin, Split, TextAttributedGraph};
use crate::llm::MockVocab;

/// File the mock model reads its vocabulary from.
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_nodes: usize,
    pub words_per_class: usize,
    pub noise_words: usize,
    pub title_tokens: usize,
    pub abstract_tokens: usize,
    /// Probability that a token is drawn from the node's class vocabulary.
    pub signal: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub train_per_class: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 5,
            n_nodes: 500,
            words_per_class: 20,
            noise_words: 200,
            title_tokens: 6,
            abstract_tokens: 30,
            signal: 0.15,
            p_in: 0.03,
            p_out: 0.0025,
            train_per_class: 10,
            n_val: 100,
            n_test: 250,
        }
    }
}

pub fn class_token(class: usize, j: usize) -> String {
    format!("t{class}w{j}")
}

pub fn vocab_for(spec: &SyntheticSpec) -> MockVocab {
    MockVocab {
        class_names: (0..spec.n_classes).map(|c| format!("topic {c}")).collect(),
        class_tokens: (0..spec.n_classes)
            .map(|c| (0..spec.words_per_class).map(|j| class_token(c, j)).collect())
            .collect(),
        filler: (0..spec.noise_words).map(|j| format!("n{j}")).collect(),
    }
}

fn document<R: Rng>(rng: &mut R, vocab: &MockVocab, class: usize, len: usize, signal: f64) -> String {
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < signal {
                vocab.class_tokens[class][rng.random_range(0..vocab.class_tokens[class].len())].clone()
            } else {
                vocab.filler[rng.random_range(0..vocab.filler.len())].clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Stochastic block model whose node text leaks the class only weakly.
/// Features are left for the featurizer.
pub fn class_text_graph(spec: &SyntheticSpec, seed: u64) -> Result<(TextAttributedGraph, MockVocab), GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocab_for(spec);
    let mut labels: Vec<usize> = (0..spec.n_nodes).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);

    let mut splits = vec![Split::None; spec.n_nodes];
    let mut order: Vec<usize> = (0..spec.n_nodes).collect();
    order.shuffle(&mut rng);
    let mut per_class = vec![0; spec.n_classes];
    let mut rest = Vec::new();
    for &i in &order {
        if per_class[labels[i]] < spec.train_per_class {
            per_class[labels[i]] += 1;
            splits[i] = Split::Train;
        } else {
            rest.push(i);
        }
    }
    for (k, &i) in rest.iter().enumerate() {
        if k < spec.n_val {
            splits[i] = Split::Val;
        } else if k < spec.n_val + spec.n_test {
            splits[i] = Split::Test;
        }
    }

    let nodes: Vec<Node> = (0..spec.n_nodes)
        .map(|i| Node {
            id: NodeId::new(format!("p{i:04}")),
            title: document(&mut rng, &vocab, labels[i], spec.title_tokens, spec.signal),
            abstract_text: document(&mut rng, &vocab, labels[i], spec.abstract_tokens, spec.signal),
            label: Some(labels[i]),
            split: splits[i],
            origin: Origin::Original,
        })
        .collect();
    let mut g = TextAttributedGraph::new(nodes)?;
    for i in 0..spec.n_nodes {
        for j in i + 1..spec.n_nodes {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                g.insert_edge(NodeId::new(format!("p{i:04}")), NodeId::new(format!("p{j:04}")))?;
            }
        }
    }
    Ok((g, vocab))
}

/// Writes the fixture as a dataset directory with its mock vocabulary.
pub fn write_class_text_dataset(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<TextAttributedGraph, GraphError> {
    let (g, vocab) = class_text_graph(spec, seed)?;
    save_graph(&g, dir)?;
    vocab
        .save(&dir.join(VOCAB_FILE))
        .map_err(|e| GraphError::Io {
            path: dir.join(VOCAB_FILE),
            source: std::io::Error::other(e.to_string()),
        })?;
    Ok(g)
}

/// Two equal blocks with dense intra-block and sparse inter-block edges.
/// Features are a block-specific mean plus Gaussian noise.
pub fn planted_two_block(n: usize, p_in: f64, p_out: f64, dim: usize, noise: f64, seed: u64) -> TextAttributedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = |i: usize| usize::from(i >= n / 2);
    let nodes: Vec<Node> = (0..n)
        .map(|i| Node {
            id: NodeId::new(format!("b{i:04}")),
            title: String::new(),
            abstract_text: String::new(),
            label: Some(block(i)),
            split: Split::None,
            origin: Origin::Original,
        })
        .collect();
    let mut g = TextAttributedGraph::new(nodes).expect("unique ids");
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                g.insert_edge(NodeId::new(format!("b{i:04}")), NodeId::new(format!("b{j:04}")))
                    .expect("valid ids");
            }
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            means[block(i)]
                .iter()
                .map(|m| (m + noise * unit.sample(&mut rng)) as f32)
                .collect()
        })
        .collect();
    g.set_features(FeatureMatrix::from_rows(dim, &rows).expect("consistent rows"))
        .expect("row count matches");
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let spec = SyntheticSpec::default();
        let (g, vocab) = class_text_graph(&spec, 1).unwrap();
        assert_eq!(g.num_nodes(), 500);
        assert_eq!(g.num_classes(), 5);
        assert_eq!(g.split_mask(Split::Train).iter().filter(|&&m| m).count(), 50);
        assert_eq!(g.split_mask(Split::Val).iter().filter(|&&m| m).count(), 100);
        assert_eq!(g.split_mask(Split::Test).iter().filter(|&&m| m).count(), 250);
        assert_eq!(vocab.class_tokens.len(), 5);
        g.validate().unwrap();
        // expected edges: 5 * C(100,2) * 0.03 + (C(500,2) - 5 * C(100,2)) * 0.0025 = 742.5 + 250
        assert!((880..1110).contains(&g.num_edges()), "{}", g.num_edges());
    }

    #[test]
    fn fixture_is_seeded() {
        let spec = SyntheticSpec::default();
        let a = class_text_graph(&spec, 3).unwrap().0;
        let b = class_text_graph(&spec, 3).unwrap().0;
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.num_edges(), b.num_edges());
    }

    #[test]
    fn two_block_density() {
        let g = planted_two_block(200, 0.3, 0.02, 8, 1.0, 0);
        // 2 * C(100,2) * 0.3 + 100^2 * 0.02 = 2970 + 200
        assert!((2900..3450).contains(&g.num_edges()), "{}", g.num_edges());
        assert_eq!(g.feature_dim(), Some(8));
    }
}

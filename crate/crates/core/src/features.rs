//! Text to feature-vector mapping shared by original and generated nodes.
//!
//! The hashed bag-of-words mode lowercases `title + " " + abstract`, splits
//! it into maximal runs of alphanumeric characters, and adds `±1` for each
//! token into bucket `fnv(seed, token) mod d`; the sign comes from a second
//! keyed hash. The counts are L2-normalized unless every bucket is zero.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{FeatureMatrix, GraphError, TextAttributedGraph};
use crate::llm::GenerationRecord;

const SIGN_KEY_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("precomputed features need an auxiliary embedder for generated text")]
    NoAuxEmbedder,
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("embedder returned dimension {actual}, expected {expected}")]
    EmbedderDim { expected: usize, actual: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    Precomputed,
    HashedBow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    pub dim: usize,
    pub hash_seed: u64,
    pub lowercase: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            mode: FeatureMode::HashedBow,
            dim: 256,
            hash_seed: 0,
            lowercase: true,
        }
    }
}

/// Embeds generated text when the graph's own features were precomputed.
pub trait AuxEmbedder: Sync {
    fn embed(&self, title: &str, abstract_text: &str) -> Vec<f32>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Featurized {
    pub vector: Vec<f32>,
    /// Set when the text had no tokens and the vector is all zeros.
    pub empty_text: bool,
}

/// Tokens: maximal runs of alphanumeric characters.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn keyed_hash(key: u64, token: &str) -> u64 {
    let mut h = FnvHasher::with_key(key);
    h.write(token.as_bytes());
    h.finish()
}

pub fn featurize_text(spec: &FeatureSpec, title: &str, abstract_text: &str) -> Featurized {
    let dim = spec.dim.max(1);
    let mut acc = vec![0.0f64; dim];
    let joined = format!("{title} {abstract_text}");
    for tok in tokenize(&joined, spec.lowercase) {
        let bucket = (keyed_hash(spec.hash_seed, &tok) % dim as u64) as usize;
        let sign = if keyed_hash(spec.hash_seed ^ SIGN_KEY_MIX, &tok) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let empty_text = norm == 0.0;
    let vector = if empty_text {
        vec![0.0; dim]
    } else {
        acc.iter().map(|x| (x / norm) as f32).collect()
    };
    Featurized { vector, empty_text }
}

/// Features for generated nodes, one vector per record.
pub fn featurize_generated(
    spec: &FeatureSpec,
    records: &[GenerationRecord],
    aux: Option<&dyn AuxEmbedder>,
) -> Result<Vec<Vec<f32>>, FeatureError> {
    records
        .iter()
        .map(|r| embed_text(spec, &r.generated_title, &r.generated_abstract, aux))
        .collect()
}

pub fn embed_text(
    spec: &FeatureSpec,
    title: &str,
    abstract_text: &str,
    aux: Option<&dyn AuxEmbedder>,
) -> Result<Vec<f32>, FeatureError> {
    match spec.mode {
        FeatureMode::HashedBow => Ok(featurize_text(spec, title, abstract_text).vector),
        FeatureMode::Precomputed => {
            let emb = aux.ok_or(FeatureError::NoAuxEmbedder)?;
            let v = emb.embed(title, abstract_text);
            if v.len() != spec.dim {
                return Err(FeatureError::EmbedderDim {
                    expected: spec.dim,
                    actual: v.len(),
                });
            }
            Ok(v)
        }
    }
}

/// Replaces the graph's feature matrix with hashed bag-of-words vectors.
pub fn featurize_graph(spec: &FeatureSpec, g: &mut TextAttributedGraph) -> Result<usize, FeatureError> {
    if spec.dim == 0 {
        return Err(FeatureError::ZeroDim);
    }
    let mut empty = 0;
    let mut data = Vec::with_capacity(g.num_nodes() * spec.dim);
    for n in g.nodes() {
        let f = featurize_text(spec, &n.title, &n.abstract_text);
        if f.empty_text {
            empty += 1;
        }
        data.extend_from_slice(&f.vector);
    }
    if empty > 0 {
        log::warn!("{empty} nodes have no text tokens; using zero features");
    }
    g.set_features(FeatureMatrix::new(spec.dim, data)?)?;
    Ok(empty)
}

//! Link prediction between generated and original nodes with a federated
//! MLP over concatenated node features.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{train_federated, FedConfig, FedError, LocalTask, Participant, RoundReport, WeightSource};
use crate::graph::{AddedEdge, EdgeDelta, EdgeKind, NodeId, Origin, TextAttributedGraph};
use crate::nn::{bce_loss_and_grad, mlp_backward, mlp_forward, mlp_forward_cached, AdamConfig, ModelParams, NnError, Optimizer};

/// Rows scored per forward pass.
const SCORE_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("graph has no edges to learn from")]
    NoEdges,
    #[error("graph too dense: {edges} edges but only {non_edges} non-edges")]
    TooDense { edges: usize, non_edges: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a generated node")]
    NotGenerated(NodeId),
    #[error("graph has no feature matrix")]
    FeaturesMissing,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Positive (existing) and count-matched negative pairs among original nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSampleSet {
    pub positives: Vec<(NodeId, NodeId)>,
    pub negatives: Vec<(NodeId, NodeId)>,
}

fn canonical(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Unordered pair index `k` over `n` items to `(i, j)` with `i < j`.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

pub fn build_samples(g: &TextAttributedGraph, seed: u64) -> Result<EdgeSampleSet, EdgeError> {
    let originals: Vec<&NodeId> = g.original_ids().collect();
    let is_original = |id: &NodeId| g.node(id).is_some_and(|n| n.origin == Origin::Original);
    let positives: Vec<(NodeId, NodeId)> = g
        .edges()
        .filter(|e| {
            let (a, b) = e.endpoints();
            is_original(a) && is_original(b)
        })
        .map(|e| {
            let (a, b) = e.endpoints();
            canonical(a, b)
        })
        .collect();
    if positives.is_empty() {
        return Err(EdgeError::NoEdges);
    }
    let n = originals.len();
    let all_pairs = n * (n - 1) / 2;
    let non_edges = all_pairs - positives.len();
    if non_edges < positives.len() {
        return Err(EdgeError::TooDense {
            edges: positives.len(),
            non_edges,
        });
    }
    let edge_set: HashSet<&(NodeId, NodeId)> = positives.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(positives.len());
    if non_edges <= 4 * positives.len() {
        // dense regime: enumerate the complement and subsample it
        let mut pool = Vec::with_capacity(non_edges);
        for i in 0..n {
            for j in i + 1..n {
                let p = canonical(originals[i], originals[j]);
                if !edge_set.contains(&p) {
                    pool.push(p);
                }
            }
        }
        for k in sample(&mut rng, pool.len(), positives.len()).into_iter() {
            negatives.push(pool[k].clone());
        }
    } else {
        let mut seen = HashSet::new();
        while negatives.len() < positives.len() {
            let (i, j) = unrank_pair(rng.random_range(0..all_pairs), n);
            let p = canonical(originals[i], originals[j]);
            if !edge_set.contains(&p) && seen.insert(p.clone()) {
                negatives.push(p);
            }
        }
    }
    Ok(EdgeSampleSet { positives, negatives })
}

fn feature_rows(g: &TextAttributedGraph, id: &NodeId) -> Result<Vec<f64>, EdgeError> {
    if !g.contains(id) {
        return Err(EdgeError::UnknownNode(id.clone()));
    }
    let row = g.feature_row(id).ok_or(EdgeError::FeaturesMissing)?;
    Ok(row.iter().map(|&v| v as f64).collect())
}

/// `x_a ‖ x_b` for every pair, one row each.
pub fn pair_inputs(g: &TextAttributedGraph, pairs: &[(NodeId, NodeId)]) -> Result<Array2<f64>, EdgeError> {
    let d = g.feature_dim().ok_or(EdgeError::FeaturesMissing)?;
    let mut out = Array2::zeros((pairs.len(), 2 * d));
    for (r, (a, b)) in pairs.iter().enumerate() {
        let (xa, xb) = (feature_rows(g, a)?, feature_rows(g, b)?);
        for j in 0..d {
            out[[r, j]] = xa[j];
            out[[r, d + j]] = xb[j];
        }
    }
    Ok(out)
}

/// One client's link-prediction objective. Every pair is used in both
/// orientations so the learned score is close to symmetric.
#[derive(Clone, Debug)]
pub struct EdgeTask {
    pub inputs: Array2<f64>,
    pub targets: Vec<f64>,
    pub n_original: usize,
}

impl EdgeTask {
    pub fn new(g: &TextAttributedGraph, samples: &EdgeSampleSet) -> Result<Self, EdgeError> {
        let mut pairs = Vec::with_capacity(4 * samples.positives.len());
        let mut targets = Vec::with_capacity(pairs.capacity());
        for (set, y) in [(&samples.positives, 1.0), (&samples.negatives, 0.0)] {
            for (a, b) in set {
                pairs.push((a.clone(), b.clone()));
                pairs.push((b.clone(), a.clone()));
                targets.extend([y, y]);
            }
        }
        Ok(EdgeTask {
            inputs: pair_inputs(g, &pairs)?,
            targets,
            n_original: g.num_original(),
        })
    }
}

impl LocalTask for EdgeTask {
    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams), NnError> {
        let (probs, cache) = mlp_forward_cached(params, self.inputs.view())?;
        let (loss, dp) = bce_loss_and_grad(probs.as_slice().expect("contiguous"), &self.targets)?;
        Ok((loss, mlp_backward(params, &cache, &dp)?))
    }

    fn has_training_data(&self) -> bool {
        !self.targets.is_empty()
    }

    fn weight(&self, _: WeightSource) -> usize {
        self.n_original
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgePredictorConfig {
    pub hidden: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub adam: AdamConfig,
}

impl Default for EdgePredictorConfig {
    fn default() -> Self {
        EdgePredictorConfig {
            hidden: 512,
            rounds: 50,
            local_epochs: 2,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// FedAvg training of the edge MLP on every client's samples.
pub fn train_edge_predictor_federated(
    tasks: Vec<EdgeTask>,
    feature_dim: usize,
    cfg: &EdgePredictorConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<RoundReport>), EdgeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ModelParams::init_mlp4(2 * feature_dim, [cfg.hidden; 3], &mut rng);
    if cfg.rounds == 0 {
        return Ok((init, Vec::new()));
    }
    let mut participants: Vec<Participant<EdgeTask>> = tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| Participant::new(i, t, Optimizer::adam(cfg.adam)))
        .collect();
    let fed = FedConfig {
        rounds: cfg.rounds,
        local_epochs: cfg.local_epochs,
        seed,
        ..FedConfig::default()
    };
    Ok(train_federated(&init, &mut participants, &fed)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCandidate {
    pub generated: NodeId,
    pub original: NodeId,
    pub score: f64,
}

/// Scores every (generated, original) pair in `g` for the listed generated
/// nodes, skipping each generated node's own center.
pub fn score_candidates(phi: &ModelParams, g: &TextAttributedGraph, generated: &[NodeId]) -> Result<Vec<EdgeCandidate>, EdgeError> {
    let originals: Vec<NodeId> = g.original_ids().cloned().collect();
    let mut pairs = Vec::new();
    for gid in generated {
        let center = match g.node(gid).map(|n| &n.origin) {
            Some(Origin::Generated { center }) => center,
            Some(Origin::Original) => return Err(EdgeError::NotGenerated(gid.clone())),
            None => return Err(EdgeError::UnknownNode(gid.clone())),
        };
        for o in &originals {
            if o != center {
                pairs.push((gid.clone(), o.clone()));
            }
        }
    }
    let scores = score_pairs(phi, g, &pairs)?;
    Ok(pairs
        .into_iter()
        .zip(scores)
        .map(|((generated, original), score)| EdgeCandidate {
            generated,
            original,
            score,
        })
        .collect())
}

/// Edge probabilities for arbitrary pairs, in input order.
pub fn score_pairs(phi: &ModelParams, g: &TextAttributedGraph, pairs: &[(NodeId, NodeId)]) -> Result<Vec<f64>, EdgeError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let x = pair_inputs(g, chunk)?;
        out.extend(mlp_forward(phi, x.view())?.iter().copied());
    }
    Ok(out)
}

fn rank(a: &EdgeCandidate, b: &EdgeCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.original.cmp(&b.original))
        .then_with(|| a.generated.cmp(&b.generated))
}

/// The `k` best candidates; ties go to the smaller (original, generated) ids.
pub fn select_top_k(candidates: &[EdgeCandidate], k: usize) -> EdgeDelta {
    let mut sorted: Vec<&EdgeCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| rank(a, b));
    EdgeDelta {
        added_edges: sorted
            .into_iter()
            .take(k)
            .map(|c| AddedEdge {
                a: c.generated.clone(),
                b: c.original.clone(),
                score: c.score,
                kind: EdgeKind::Predicted,
            })
            .collect(),
    }
}

/// Area under the ROC curve, with tied scores counted as half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Removes a random fraction of edges from `g` and pairs them with an equal
/// number of non-edges, for held-out evaluation.
pub fn holdout_split(
    g: &TextAttributedGraph,
    fraction: f64,
    seed: u64,
) -> Result<(TextAttributedGraph, EdgeSampleSet), EdgeError> {
    let all = build_samples(g, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let m = ((all.positives.len() as f64) * fraction).round() as usize;
    let held: HashSet<usize> = sample(&mut rng, all.positives.len(), m).into_iter().collect();
    let mut kept = Vec::new();
    let mut test_pos = Vec::new();
    for (i, p) in all.positives.iter().enumerate() {
        if held.contains(&i) {
            test_pos.push(p.clone());
        } else {
            kept.push(p.clone());
        }
    }
    let test_neg = all.negatives[..m].to_vec();
    let mut train = TextAttributedGraph::new(g.nodes().to_vec()).map_err(|_| EdgeError::NoEdges)?;
    if let Some(f) = g.features().cloned() {
        train.set_features(f).map_err(|_| EdgeError::FeaturesMissing)?;
    }
    for (a, b) in kept {
        train.insert_edge(a, b).map_err(|_| EdgeError::NoEdges)?;
    }
    Ok((
        train,
        EdgeSampleSet {
            positives: test_pos,
            negatives: test_neg,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAuditEntry {
    pub client: usize,
    pub generated_id: NodeId,
    pub original_id: NodeId,
    pub score: f64,
    pub round: u32,
}

pub fn append_edge_audit(path: &Path, entries: &[EdgeAuditEntry]) -> Result<(), EdgeError> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FeatureMatrix, Node, Split};

    fn node(id: &str) -> Node {
        Node {
            id: NodeId::from(id),
            title: String::new(),
            abstract_text: String::new(),
            label: None,
            split: Split::None,
            origin: Origin::Original,
        }
    }

    fn graph(ids: &[&str], edges: &[(&str, &str)], d: usize) -> TextAttributedGraph {
        let mut g = TextAttributedGraph::new(ids.iter().map(|i| node(i)).collect())
            .unwrap()
            .with_edges(edges.iter().map(|(a, b)| (NodeId::from(*a), NodeId::from(*b))))
            .unwrap();
        let rows: Vec<Vec<f32>> = (0..ids.len()).map(|i| (0..d).map(|j| ((i * d + j) as f32 * 0.37).sin()).collect()).collect();
        g.set_features(FeatureMatrix::from_rows(d, &rows).unwrap()).unwrap();
        g
    }

    #[test]
    fn triangle_has_no_negatives() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("a", "c")], 2);
        assert!(matches!(build_samples(&g, 0), Err(EdgeError::TooDense { edges: 3, non_edges: 0 })));
    }

    #[test]
    fn path_negatives_are_the_complement() {
        let g = graph(&["a", "b", "c", "d"], &[("a", "b"), ("b", "c"), ("c", "d")], 2);
        let s = build_samples(&g, 9).unwrap();
        let mut neg = s.negatives.clone();
        neg.sort();
        let expect: Vec<(NodeId, NodeId)> = [("a", "c"), ("a", "d"), ("b", "d")]
            .iter()
            .map(|(a, b)| (NodeId::from(*a), NodeId::from(*b)))
            .collect();
        assert_eq!(neg, expect);
        assert_eq!(s.positives.len(), 3);
    }

    #[test]
    fn sparse_sampling_is_seeded_and_disjoint() {
        let ids: Vec<String> = (0..40).map(|i| format!("n{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let edges: Vec<(&str, &str)> = (0..39).map(|i| (refs[i], refs[i + 1])).collect();
        let g = graph(&refs, &edges, 2);
        let a = build_samples(&g, 3).unwrap();
        assert_eq!(a, build_samples(&g, 3).unwrap());
        assert_ne!(a.negatives, build_samples(&g, 4).unwrap().negatives);
        let pos: HashSet<_> = a.positives.iter().collect();
        let neg: HashSet<_> = a.negatives.iter().collect();
        assert_eq!(neg.len(), a.positives.len());
        assert!(pos.is_disjoint(&neg));
        assert!(a.negatives.iter().all(|(x, y)| x != y));
    }

    #[test]
    fn unrank_covers_all_pairs() {
        let n = 6;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| unrank_pair(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }

    fn with_generated(n_gen: usize) -> TextAttributedGraph {
        let mut g = graph(&["o1", "o2", "o3", "o4", "o5"], &[("o1", "o2"), ("o3", "o4")], 3);
        for i in 0..n_gen {
            g.add_generated_node(&NodeId::from(format!("o{}", i + 1).as_str()), "t", "a", &[0.1, 0.2, 0.3]).unwrap();
        }
        g
    }

    #[test]
    fn candidate_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = ModelParams::init_mlp4(6, [4, 4, 4], &mut rng);
        let g = with_generated(2);
        assert!(score_candidates(&phi, &g, &[]).unwrap().is_empty());
        let gen: Vec<NodeId> = g.generated_ids().cloned().collect();
        let c = score_candidates(&phi, &g, &gen).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|c| !matches!(g.node(&c.generated).map(|n| &n.origin), Some(Origin::Generated { center }) if *center == c.original)));
        assert!(matches!(score_candidates(&phi, &g, &[NodeId::from("o1")]), Err(EdgeError::NotGenerated(_))));
    }

    #[test]
    fn zero_phi_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut phi = ModelParams::init_mlp4(6, [4, 4, 4], &mut rng);
        phi.scale(0.0);
        let g = with_generated(2);
        let gen: Vec<NodeId> = g.generated_ids().cloned().collect();
        assert!(score_candidates(&phi, &g, &gen).unwrap().iter().all(|c| c.score == 0.5));
    }

    fn cand(g: &str, o: &str, score: f64) -> EdgeCandidate {
        EdgeCandidate {
            generated: NodeId::from(g),
            original: NodeId::from(o),
            score,
        }
    }

    #[test]
    fn top_k_rules() {
        let cs = vec![cand("g1", "o4", 0.5), cand("g1", "o1", 0.9), cand("g2", "o2", 0.5), cand("g2", "o3", 0.1)];
        assert!(select_top_k(&cs, 0).is_empty());
        assert_eq!(select_top_k(&cs, 10).len(), 4);
        let top = select_top_k(&cs, 2);
        let got: Vec<(&str, f64)> = top.added_edges.iter().map(|e| (e.b.as_str(), e.score)).collect();
        assert_eq!(got, vec![("o1", 0.9), ("o2", 0.5)]);
        let mut rev = cs.clone();
        rev.reverse();
        assert_eq!(select_top_k(&rev, 2), top);
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]), 0.5);
        // one inversion out of four pairs
        assert_eq!(roc_auc(&[0.9, 0.3, 0.5, 0.1], &[true, true, false, false]), 0.75);
    }

    #[test]
    fn loss_decreases_on_separable_samples() {
        // positives join nodes with matching sign in the first coordinate
        let n = 30;
        let ids: Vec<String> = (0..n).map(|i| format!("v{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut g = TextAttributedGraph::new(refs.iter().map(|i| node(i)).collect()).unwrap();
        let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f32 * 0.1).cos()]).collect();
        g.set_features(FeatureMatrix::from_rows(2, &rows).unwrap()).unwrap();
        for i in 0..n {
            let j = (i + 2) % n;
            g.insert_edge(NodeId::from(refs[i]), NodeId::from(refs[j])).unwrap();
        }
        let task = EdgeTask::new(&g, &build_samples(&g, 1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut phi = ModelParams::init_mlp4(4, [16, 16, 16], &mut rng);
        let mut opt = Optimizer::adam(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (loss, grad) = task.loss_and_grad(&phi).unwrap();
            assert!(loss < last, "{loss} >= {last}");
            last = loss;
            opt.step(&mut phi, &grad).unwrap();
        }
    }

    #[test]
    fn zero_rounds_returns_init() {
        let g = graph(&["a", "b", "c", "d"], &[("a", "b"), ("b", "c"), ("c", "d")], 2);
        let t = EdgeTask::new(&g, &build_samples(&g, 0).unwrap()).unwrap();
        let cfg = EdgePredictorConfig {
            hidden: 4,
            rounds: 0,
            ..EdgePredictorConfig::default()
        };
        let (phi, reports) = train_edge_predictor_federated(vec![t], 2, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(phi.bitwise_eq(&ModelParams::init_mlp4(4, [4; 3], &mut rng)));
        assert!(reports.is_empty());
    }

    #[test]
    fn audit_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges_added.jsonl");
        let e = EdgeAuditEntry {
            client: 0,
            generated_id: NodeId::from("g0:a:0"),
            original_id: NodeId::from("b"),
            score: 0.75,
            round: 0,
        };
        append_edge_audit(&path, &[e.clone()]).unwrap();
        append_edge_audit(&path, &[e]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}

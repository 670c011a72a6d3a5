//! Label-skewed client partitioning.
//!
//! For every class a proportion vector over clients is drawn from
//! `Dirichlet(alpha * 1_n)` and that class's nodes are dealt out in shuffled
//! order according to the cumulative proportions. Draws that leave some
//! client without a training node are rejected and redrawn.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, Split, TextAttributedGraph};

/// Bounded number of redraws before the skew is declared infeasible.
pub const MAX_PARTITION_ATTEMPTS: usize = 50;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("n_clients must be at least 1")]
    NoClients,
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("no partition with a training node on every one of {n_clients} clients after {attempts} draws (alpha={alpha})")]
    SkewInfeasible {
        n_clients: usize,
        alpha: f64,
        attempts: usize,
    },
    #[error("plan does not cover node {0}")]
    Unassigned(NodeId),
    #[error("plan assigns node {node} to client {client} but only {n_clients} clients exist")]
    ClientOutOfRange {
        node: NodeId,
        client: usize,
        n_clients: usize,
    },
    #[error("plan references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad partition file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Assignment of every original node to a client; serialized as `partition.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub seed: u64,
    pub alpha: f64,
    pub n_clients: usize,
    pub assignments: BTreeMap<NodeId, usize>,
}

impl PartitionPlan {
    pub fn save(&self, path: &Path) -> Result<(), PartitionError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PartitionError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn client_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }
}

fn draw_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Splits `len` shuffled items into `props.len()` contiguous runs whose
/// boundaries are `floor(cumsum(props) * len)`.
fn cut_points(props: &[f64], len: usize) -> Vec<usize> {
    let mut cuts = Vec::with_capacity(props.len() + 1);
    cuts.push(0);
    let mut acc = 0.0;
    for p in &props[..props.len() - 1] {
        acc += p;
        cuts.push(((acc * len as f64).floor() as usize).min(len));
    }
    cuts.push(len);
    cuts
}

pub fn dirichlet_partition(
    g: &TextAttributedGraph,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if n_clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PartitionError::BadAlpha(alpha));
    }
    let originals: Vec<usize> = (0..g.num_nodes())
        .filter(|&i| !g.nodes()[i].origin.is_generated())
        .collect();
    let n_classes = g.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    let mut unlabeled = Vec::new();
    for &i in &originals {
        match g.nodes()[i].label {
            Some(c) => by_class[c].push(i),
            None => unlabeled.push(i),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut owner = vec![0usize; g.num_nodes()];
        if n_clients > 1 {
            for members in &by_class {
                let mut members = members.clone();
                members.shuffle(&mut rng);
                let props = draw_dirichlet(&mut rng, alpha, n_clients);
                let cuts = cut_points(&props, members.len());
                for client in 0..n_clients {
                    for &i in &members[cuts[client]..cuts[client + 1]] {
                        owner[i] = client;
                    }
                }
            }
            for &i in &unlabeled {
                owner[i] = rng.random_range(0..n_clients);
            }
        }
        let mut has_train = vec![false; n_clients];
        for &i in &originals {
            if g.nodes()[i].split == Split::Train {
                has_train[owner[i]] = true;
            }
        }
        if has_train.iter().all(|&b| b) {
            let assignments = originals
                .iter()
                .map(|&i| (g.nodes()[i].id.clone(), owner[i]))
                .collect();
            return Ok(PartitionPlan {
                seed,
                alpha,
                n_clients,
                assignments,
            });
        }
    }
    Err(PartitionError::SkewInfeasible {
        n_clients,
        alpha,
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

/// Client subgraphs plus the number of edges that crossed client boundaries.
#[derive(Clone, Debug)]
pub struct Partitioned {
    pub clients: Vec<TextAttributedGraph>,
    pub dropped_edges: usize,
}

pub fn materialize_subgraphs(
    g: &TextAttributedGraph,
    plan: &PartitionPlan,
) -> Result<Partitioned, PartitionError> {
    for id in plan.assignments.keys() {
        if !g.contains(id.as_str()) {
            return Err(PartitionError::UnknownNode(id.clone()));
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); plan.n_clients];
    for (i, node) in g.nodes().iter().enumerate() {
        if node.origin.is_generated() {
            continue;
        }
        let client = plan
            .client_of(node.id.as_str())
            .ok_or_else(|| PartitionError::Unassigned(node.id.clone()))?;
        if client >= plan.n_clients {
            return Err(PartitionError::ClientOutOfRange {
                node: node.id.clone(),
                client,
                n_clients: plan.n_clients,
            });
        }
        members[client].push(i);
    }
    let clients: Vec<TextAttributedGraph> = members
        .iter()
        .enumerate()
        .map(|(c, keep)| {
            let mut sub = g.induced(keep);
            sub.set_client_tag(c);
            sub
        })
        .collect();
    let kept: usize = clients.iter().map(TextAttributedGraph::num_edges).sum();
    let original_edges = g.original_projection().num_edges();
    Ok(Partitioned {
        dropped_edges: original_edges - kept,
        clients,
    })
}

/// Class histogram of the labeled nodes of a graph, normalized to sum to 1.
pub fn class_distribution(labels: impl Iterator<Item = usize>, n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_classes];
    let mut total = 0.0;
    for c in labels {
        counts[c] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        for x in &mut counts {
            *x /= total;
        }
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total-variation distance between each client's class distribution and
/// the global one. Clients without labeled nodes are reported as 1.0.
pub fn client_tv_distances(g: &TextAttributedGraph, plan: &PartitionPlan) -> Vec<f64> {
    let n_classes = g.num_classes();
    let global = class_distribution(g.nodes().iter().filter_map(|n| n.label), n_classes);
    (0..plan.n_clients)
        .map(|c| {
            let labels: Vec<usize> = g
                .nodes()
                .iter()
                .filter(|n| plan.client_of(n.id.as_str()) == Some(c))
                .filter_map(|n| n.label)
                .collect();
            if labels.is_empty() {
                1.0
            } else {
                total_variation(&class_distribution(labels.into_iter(), n_classes), &global)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Node, Origin};
    use proptest::prelude::*;

    fn labeled_graph(n: usize, classes: usize, train_every: usize) -> TextAttributedGraph {
        let nodes = (0..n)
            .map(|i| Node {
                id: NodeId::new(format!("v{i:05}")),
                title: String::new(),
                abstract_text: String::new(),
                label: Some(i % classes),
                split: if i % train_every == 0 { Split::Train } else { Split::Test },
                origin: Origin::Original,
            })
            .collect();
        TextAttributedGraph::new(nodes).unwrap()
    }

    fn with_ring(g: TextAttributedGraph) -> TextAttributedGraph {
        let n = g.num_nodes();
        let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id.clone()).collect();
        g.with_edges((0..n).map(|i| (ids[i].clone(), ids[(i + 1) % n].clone())))
            .unwrap()
    }

    #[test]
    fn single_client_gets_everything() {
        let g = with_ring(labeled_graph(30, 3, 2));
        let plan = dirichlet_partition(&g, 1, 0.3, 7).unwrap();
        assert!(plan.assignments.values().all(|&c| c == 0));
        let parts = materialize_subgraphs(&g, &plan).unwrap();
        assert_eq!(parts.clients.len(), 1);
        assert_eq!(parts.clients[0].nodes(), g.nodes());
        assert_eq!(parts.clients[0].num_edges(), g.num_edges());
        assert_eq!(parts.dropped_edges, 0);
    }

    #[test]
    fn same_seed_same_plan() {
        let g = labeled_graph(200, 4, 3);
        let a = dirichlet_partition(&g, 5, 1.0, 99).unwrap();
        let b = dirichlet_partition(&g, 5, 1.0, 99).unwrap();
        assert_eq!(a, b);
        let c = dirichlet_partition(&g, 5, 1.0, 100).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn path_graph_cross_edges_are_dropped() {
        let g = labeled_graph(3, 1, 1)
            .with_edges([
                ("v00000".into(), "v00001".into()),
                ("v00001".into(), "v00002".into()),
            ])
            .unwrap();
        let plan = PartitionPlan {
            seed: 0,
            alpha: 1.0,
            n_clients: 2,
            assignments: [("v00000", 0), ("v00001", 1), ("v00002", 0)]
                .into_iter()
                .map(|(id, c)| (NodeId::from(id), c))
                .collect(),
        };
        let parts = materialize_subgraphs(&g, &plan).unwrap();
        assert_eq!(parts.clients[0].num_edges(), 0);
        assert_eq!(parts.clients[1].num_edges(), 0);
        assert_eq!(parts.dropped_edges, 2);
    }

    #[test]
    fn infeasible_skew_is_reported() {
        // one training node cannot cover two clients
        let g = labeled_graph(10, 2, 100);
        let err = dirichlet_partition(&g, 2, 1.0, 0).unwrap_err();
        assert!(matches!(err, PartitionError::SkewInfeasible { attempts: 50, .. }));
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = labeled_graph(10, 2, 1);
        assert!(matches!(dirichlet_partition(&g, 0, 1.0, 0), Err(PartitionError::NoClients)));
        assert!(matches!(dirichlet_partition(&g, 2, 0.0, 0), Err(PartitionError::BadAlpha(_))));
    }

    #[test]
    fn unlabeled_nodes_are_assigned() {
        let mut nodes: Vec<Node> = labeled_graph(40, 2, 2).nodes().to_vec();
        for n in nodes.iter_mut().skip(30) {
            n.label = None;
            n.split = Split::None;
        }
        let g = TextAttributedGraph::new(nodes).unwrap();
        let plan = dirichlet_partition(&g, 3, 1.0, 5).unwrap();
        assert_eq!(plan.assignments.len(), 40);
    }

    #[test]
    fn cora_sized_alpha_100_is_near_uniform() {
        // 2,708 nodes over 7 classes, 10 clients; bound checked on 100 seeds.
        let g = labeled_graph(2708, 7, 19);
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let plan = dirichlet_partition(&g, 10, 100.0, seed).unwrap();
            let max_tv = client_tv_distances(&g, &plan)
                .into_iter()
                .fold(0.0, f64::max);
            worst = worst.max(max_tv);
        }
        assert!(worst < 0.15, "worst max-TV over 100 seeds = {worst}");
    }

    #[test]
    fn plan_file_round_trips() {
        let g = labeled_graph(50, 3, 2);
        let plan = dirichlet_partition(&g, 3, 0.5, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.json");
        plan.save(&path).unwrap();
        assert_eq!(PartitionPlan::load(&path).unwrap(), plan);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn partition_is_exhaustive_disjoint_and_accounts_edges(
            seed in any::<u64>(),
            n_clients in 1usize..6,
            alpha in 0.2f64..50.0,
            extra in proptest::collection::vec((0usize..120, 0usize..120), 0..200),
        ) {
            let g = with_ring(labeled_graph(120, 4, 2));
            let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id.clone()).collect();
            let mut g = g;
            for (a, b) in extra {
                if a != b {
                    g.insert_edge(ids[a].clone(), ids[b].clone()).unwrap();
                }
            }
            let plan = dirichlet_partition(&g, n_clients, alpha, seed).unwrap();
            let parts = materialize_subgraphs(&g, &plan).unwrap();
            let total: usize = parts.clients.iter().map(|c| c.num_nodes()).sum();
            prop_assert_eq!(total, g.num_nodes());
            let mut seen = std::collections::HashSet::new();
            for c in &parts.clients {
                for n in c.nodes() {
                    prop_assert!(seen.insert(n.id.clone()));
                }
            }
            let kept: usize = parts.clients.iter().map(|c| c.num_edges()).sum();
            prop_assert_eq!(parts.dropped_edges, g.num_edges() - kept);
        }
    }
}

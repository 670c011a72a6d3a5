use crate::federation::NodeTask;
use crate::graph::{GraphError, NodeId, TextAttributedGraph};
use crate::nn::{gcn_forward, softmax_rows, ModelParams, NnError};

/// Max softmax probability per original node, in graph order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceTable {
    pub entries: Vec<(NodeId, f64)>,
}

impl ConfidenceTable {
    pub fn get(&self, id: &NodeId) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == id).map(|&(_, p)| p)
    }

    pub fn mean_of<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Option<f64> {
        let vals: Vec<f64> = ids.into_iter().filter_map(|id| self.get(id)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Confidence of the model on the full (augmented) graph, read at original
/// nodes only.
pub fn compute_confidence(params: &ModelParams, g: &TextAttributedGraph) -> Result<ConfidenceTable, NnError> {
    let task = NodeTask::from_graph(g).map_err(|e: GraphError| NnError::Shape(e.to_string()))?;
    let probs = softmax_rows(&gcn_forward(params, &task.adj, task.x.view())?);
    let entries = g
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.origin.is_generated())
        .map(|(i, n)| (n.id.clone(), probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    Ok(ConfidenceTable { entries })
}

/// The `k` least confident nodes, ascending; ties by id.
pub fn select_reflection_targets(table: &ConfidenceTable, k: usize) -> Vec<NodeId> {
    let mut sorted: Vec<&(NodeId, f64)> = table.entries.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Logits;
    use ndarray::array;

    fn max_prob(row: &[f64]) -> f64 {
        let z = Logits(ndarray::Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap());
        softmax_rows(&z).iter().copied().fold(0.0, f64::max)
    }

    #[test]
    fn confidence_values() {
        assert!((max_prob(&[0.4, 0.4, 0.4]) - 1.0 / 3.0).abs() < 1e-12);
        let e2 = 2f64.exp();
        let hand = e2 / (e2 + 1f64.exp() + 1.0);
        assert!((max_prob(&[2.0, 1.0, 0.0]) - hand).abs() < 1e-12);
        assert!((hand - 0.6652).abs() < 1e-4);
        assert!(max_prob(&[10.0, 0.0, 0.0]) > 0.9999);
        let z = Logits(array![[1.0, 2.0], [0.0, -3.0]]);
        for r in softmax_rows(&z).rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
        }
    }

    fn table(pairs: &[(&str, f64)]) -> ConfidenceTable {
        ConfidenceTable {
            entries: pairs.iter().map(|(n, p)| (NodeId::from(*n), *p)).collect(),
        }
    }

    #[test]
    fn target_selection() {
        let t = table(&[("a", 0.9), ("b", 0.2), ("c", 0.4)]);
        assert!(select_reflection_targets(&t, 0).is_empty());
        assert_eq!(select_reflection_targets(&t, 2), vec![NodeId::from("b"), NodeId::from("c")]);
        assert_eq!(
            select_reflection_targets(&t, 10),
            vec![NodeId::from("b"), NodeId::from("c"), NodeId::from("a")]
        );
        let tied = table(&[("z", 0.5), ("y", 0.5), ("x", 0.7)]);
        assert_eq!(select_reflection_targets(&tied, 1), vec![NodeId::from("y")]);
    }
}

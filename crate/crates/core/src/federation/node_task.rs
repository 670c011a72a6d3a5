use ndarray::Array2;

use super::{LocalTask, WeightSource};
use crate::graph::{GraphError, Split, TextAttributedGraph};
use crate::nn::{gcn_backward, gcn_forward, gcn_forward_cached, softmax_ce_loss_and_grad, ModelParams, NnError, NormalizedAdjacency};

/// Semi-supervised node classification on one client graph.
#[derive(Clone, Debug)]
pub struct NodeTask {
    pub adj: NormalizedAdjacency,
    pub x: Array2<f64>,
    pub labels: Vec<Option<usize>>,
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
    pub original: Vec<bool>,
}

impl NodeTask {
    pub fn from_graph(g: &TextAttributedGraph) -> Result<Self, GraphError> {
        let f = g.features().ok_or(GraphError::FeaturesMissing)?;
        let x = Array2::from_shape_fn((g.num_nodes(), f.dim()), |(i, j)| f.row(i)[j] as f64);
        Ok(NodeTask {
            adj: NormalizedAdjacency::from_graph(g),
            x,
            labels: g.labels(),
            train: g.split_mask(Split::Train),
            val: g.split_mask(Split::Val),
            test: g.split_mask(Split::Test),
            original: g.nodes().iter().map(|n| !n.origin.is_generated()).collect(),
        })
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::None => &[],
        }
    }

    /// `(correct, total)` of argmax predictions over `split`.
    pub fn accuracy_counts(&self, params: &ModelParams, split: Split) -> Result<(usize, usize), NnError> {
        let mask = self.mask(split);
        if !mask.iter().any(|&m| m) {
            return Ok((0, 0));
        }
        let pred = gcn_forward(params, &self.adj, self.x.view())?.argmax_rows();
        let mut correct = 0;
        let mut total = 0;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                total += 1;
                if self.labels[i] == Some(pred[i]) {
                    correct += 1;
                }
            }
        }
        Ok((correct, total))
    }
}

impl LocalTask for NodeTask {
    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams), NnError> {
        let (z, cache) = gcn_forward_cached(params, &self.adj, self.x.view())?;
        let (loss, dz) = softmax_ce_loss_and_grad(&z, &self.labels, &self.train)?;
        let grad = gcn_backward(params, &self.adj, self.x.view(), &cache, dz.view())?;
        Ok((loss, grad))
    }

    fn has_training_data(&self) -> bool {
        self.train.iter().any(|&t| t)
    }

    fn weight(&self, source: WeightSource) -> usize {
        match source {
            WeightSource::OriginalOnly => self.original.iter().filter(|&&o| o).count(),
            WeightSource::OriginalPlusGenerated => self.original.len(),
        }
    }

    fn validation_counts(&self, params: &ModelParams) -> Option<(usize, usize)> {
        self.accuracy_counts(params, Split::Val).ok()
    }
}

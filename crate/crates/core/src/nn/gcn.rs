//! Two-layer graph convolution: `Z = Â · relu(Â · X · W1 + b1) · W2 + b2`
//! with `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.

use ndarray::{Array2, ArrayView2, Axis};

use super::{Architecture, Logits, ModelParams, NnError};
use crate::graph::{NodeId, TextAttributedGraph};

/// Symmetric renormalized adjacency with self-loops, as a coordinate list
/// sorted by `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    node_ids: Vec<NodeId>,
}

impl NormalizedAdjacency {
    /// Builds from undirected index pairs over `n` nodes. Duplicate pairs and
    /// self-pairs are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * edges.len() + n);
        for &(a, b) in edges {
            if a != b {
                pairs.push((a, b));
                pairs.push((b, a));
            }
        }
        pairs.extend((0..n).map(|i| (i, i)));
        pairs.sort_unstable();
        pairs.dedup();
        let mut degree = vec![0.0f64; n];
        for &(r, _) in &pairs {
            degree[r] += 1.0;
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let entries = pairs
            .into_iter()
            .map(|(r, c)| (r, c, inv_sqrt[r] * inv_sqrt[c]))
            .collect();
        NormalizedAdjacency {
            n,
            entries,
            node_ids: Vec::new(),
        }
    }

    pub fn from_graph(g: &TextAttributedGraph) -> Self {
        let mut adj = Self::from_edges(g.num_nodes(), &g.edge_indices());
        adj.node_ids = g.nodes().iter().map(|n| n.id.clone()).collect();
        adj
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Row index to node id map (empty when built from raw indices).
    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for &(r, c, v) in &self.entries {
            m[[r, c]] = v;
        }
        m
    }

    /// `Â · m`
    pub fn propagate(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, m.ncols()));
        for &(r, c, v) in &self.entries {
            let src = m.row(c);
            let mut dst = out.row_mut(r);
            dst.scaled_add(v, &src);
        }
        out
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GcnCache {
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

fn check_gcn_shapes(params: &ModelParams, adj: &NormalizedAdjacency, x: ArrayView2<f64>) -> Result<(), NnError> {
    if params.architecture() != Architecture::Gcn2 {
        return Err(NnError::Shape("expected gcn2 parameters".into()));
    }
    if x.nrows() != adj.num_nodes() {
        return Err(NnError::Shape(format!(
            "feature rows {} != adjacency size {}",
            x.nrows(),
            adj.num_nodes()
        )));
    }
    let w1 = params.tensor(0);
    if x.ncols() != w1.nrows() {
        return Err(NnError::Shape(format!("feature dim {} != w1 rows {}", x.ncols(), w1.nrows())));
    }
    Ok(())
}

pub fn gcn_forward(params: &ModelParams, adj: &NormalizedAdjacency, x: ArrayView2<f64>) -> Result<Logits, NnError> {
    gcn_forward_cached(params, adj, x).map(|(z, _)| z)
}

pub fn gcn_forward_cached(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    x: ArrayView2<f64>,
) -> Result<(Logits, GcnCache), NnError> {
    check_gcn_shapes(params, adj, x)?;
    let (w1, b1, w2, b2) = (params.tensor(0), params.tensor(1), params.tensor(2), params.tensor(3));
    let hidden_pre = adj.propagate(x.dot(w1).view()) + b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let logits = adj.propagate(hidden.dot(w2).view()) + b2;
    Ok((Logits(logits), GcnCache { hidden_pre, hidden }))
}

/// Gradients of a scalar loss with respect to all gcn2 parameters, given
/// `dlogits = dL/dZ`. `Â` is symmetric so `Âᵀ = Â`.
pub fn gcn_backward(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    x: ArrayView2<f64>,
    cache: &GcnCache,
    dlogits: ArrayView2<f64>,
) -> Result<ModelParams, NnError> {
    let w2 = params.tensor(2);
    if dlogits.dim() != (adj.num_nodes(), w2.ncols()) {
        return Err(NnError::Shape(format!("dlogits has shape {:?}", dlogits.dim())));
    }
    let db2 = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_hw2 = adj.propagate(dlogits);
    let dw2 = cache.hidden.t().dot(&d_hw2);
    let mut d_hidden = d_hw2.dot(&w2.t());
    ndarray::Zip::from(&mut d_hidden)
        .and(&cache.hidden_pre)
        .for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
    let db1 = d_hidden.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_xw1 = adj.propagate(d_hidden.view());
    let dw1 = x.t().dot(&d_xw1);
    ModelParams::from_tensors(
        Architecture::Gcn2,
        vec![
            ("w1".into(), dw1),
            ("b1".into(), db1),
            ("w2".into(), dw2),
            ("b2".into(), db2),
        ],
    )
}

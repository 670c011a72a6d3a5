//! Text-attributed graph storage, augmentation mutations and the dataset
//! directory format.
//!
//! A dataset directory holds:
//!
//! * `nodes.jsonl` with one `{id, title, abstract, label, split}` object per line,
//! * `edges.tsv` with two tab-separated node ids per line,
//! * `features.f32` (optional): a `d=<dim> n=<count>` header line followed by
//!   row-major little-endian `f32` values, rows in `nodes.jsonl` order,
//! * `provenance.jsonl` (optional): `{id, center}` for every generated node.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.f32";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("edge endpoint {0} does not exist")]
    DanglingEndpoint(NodeId),
    #[error("self-loop on {0}")]
    SelfLoop(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature file declares {declared} rows but graph has {nodes} nodes")]
    FeatureRowMismatch { declared: usize, nodes: usize },
    #[error("graph has no feature matrix")]
    FeaturesMissing,
    #[error("node {0} is in a train/val/test split but has no label")]
    MissingLabel(NodeId),
    #[error("node {0} is not an original node")]
    NotOriginal(NodeId),
    #[error("node {0} is not a generated node")]
    NotGenerated(NodeId),
    #[error("generated node {0} must have split=none and no label")]
    LabeledGenerated(NodeId),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Opaque node identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for NodeId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn is_labeled_split(self) -> bool {
        !matches!(self, Split::None)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Original,
    /// Produced by the generator for the given original center node.
    Generated { center: NodeId },
}

impl Origin {
    pub fn is_generated(&self) -> bool {
        matches!(self, Origin::Generated { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub title: String,
    pub abstract_text: String,
    pub label: Option<usize>,
    pub split: Split,
    pub origin: Origin,
}

/// Undirected edge stored with endpoints in ascending id order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    lo: NodeId,
    hi: NodeId,
}

impl Edge {
    /// Returns `None` for self-loops.
    pub fn new(a: NodeId, b: NodeId) -> Option<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(Edge { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Some(Edge { lo: b, hi: a }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn endpoints(&self) -> (&NodeId, &NodeId) {
        (&self.lo, &self.hi)
    }

    pub fn touches(&self, id: &NodeId) -> bool {
        &self.lo == id || &self.hi == id
    }

    pub fn other(&self, id: &NodeId) -> Option<&NodeId> {
        if &self.lo == id {
            Some(&self.hi)
        } else if &self.hi == id {
            Some(&self.lo)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    DirectCenter,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AddedEdge {
    pub a: NodeId,
    pub b: NodeId,
    pub score: f64,
    pub kind: EdgeKind,
}

/// A batch of edges to union into a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeDelta {
    pub added_edges: Vec<AddedEdge>,
}

impl EdgeDelta {
    pub fn len(&self) -> usize {
        self.added_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.added_edges.is_empty()
    }
}

/// Dense row-major feature matrix stored at `f32` precision, matching the
/// on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(GraphError::DimensionMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(GraphError::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        FeatureMatrix::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn push_row(&mut self, row: &[f32]) {
        self.data.extend_from_slice(row);
    }

    fn remove_row(&mut self, i: usize) {
        self.data.drain(i * self.dim..(i + 1) * self.dim);
    }
}

/// A text-attributed graph: nodes with text, optional labels and split
/// membership, an undirected simple edge set and a dense feature matrix.
/// Equality compares nodes, edges and features only.
#[derive(Clone, Debug)]
pub struct TextAttributedGraph {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    edges: BTreeSet<Edge>,
    features: Option<FeatureMatrix>,
    client_tag: usize,
    next_seq: HashMap<NodeId, u32>,
}

impl PartialEq for TextAttributedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges && self.features == other.features
    }
}

impl TextAttributedGraph {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let mut g = TextAttributedGraph {
            nodes: Vec::with_capacity(nodes.len()),
            index: HashMap::with_capacity(nodes.len()),
            edges: BTreeSet::new(),
            features: None,
            client_tag: 0,
            next_seq: HashMap::new(),
        };
        for node in nodes {
            g.push_node(node)?;
        }
        for node in &g.nodes {
            if let Origin::Generated { center } = &node.origin {
                if !g.index.contains_key(center) {
                    return Err(GraphError::DanglingEndpoint(center.clone()));
                }
            }
        }
        Ok(g)
    }

    fn push_node(&mut self, node: Node) -> Result<()> {
        if self.index.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        match &node.origin {
            Origin::Original => {
                if node.split.is_labeled_split() && node.label.is_none() {
                    return Err(GraphError::MissingLabel(node.id));
                }
            }
            Origin::Generated { center } => {
                if node.split != Split::None || node.label.is_some() {
                    return Err(GraphError::LabeledGenerated(node.id));
                }
                if let Some(seq) = parse_generated_seq(&node.id) {
                    let next = self.next_seq.entry(center.clone()).or_insert(0);
                    *next = (*next).max(seq + 1);
                }
            }
        }
        self.index.insert(node.id.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn with_edges<I>(mut self, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId)>,
    {
        for (a, b) in edges {
            self.insert_edge(a, b)?;
        }
        Ok(self)
    }

    /// Inserts an edge, returning whether it was new.
    pub fn insert_edge(&mut self, a: NodeId, b: NodeId) -> Result<bool> {
        for id in [&a, &b] {
            if !self.index.contains_key(id) {
                return Err(GraphError::DanglingEndpoint(id.clone()));
            }
        }
        let edge = Edge::new(a.clone(), b).ok_or(GraphError::SelfLoop(a))?;
        Ok(self.edges.insert(edge))
    }

    pub fn set_features(&mut self, features: FeatureMatrix) -> Result<()> {
        if features.rows() != self.nodes.len() {
            return Err(GraphError::FeatureRowMismatch {
                declared: features.rows(),
                nodes: self.nodes.len(),
            });
        }
        self.features = Some(features);
        Ok(())
    }

    pub fn set_client_tag(&mut self, client: usize) {
        self.client_tag = client;
    }

    pub fn client_tag(&self) -> usize {
        self.client_tag
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: impl AsRef<str>) -> Option<&Node> {
        self.index.get(id.as_ref()).map(|&i| &self.nodes[i])
    }

    pub fn index_of(&self, id: impl AsRef<str>) -> Option<usize> {
        self.index.get(id.as_ref()).copied()
    }

    pub fn contains(&self, id: impl AsRef<str>) -> bool {
        self.index.contains_key(id.as_ref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn has_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        Edge::new(a.clone(), b.clone()).is_some_and(|e| self.edges.contains(&e))
    }

    /// Edges as pairs of node indices in the current node order.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .map(|e| (self.index[&e.lo], self.index[&e.hi]))
            .collect()
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(FeatureMatrix::dim)
    }

    pub fn feature_row(&self, id: impl AsRef<str>) -> Option<&[f32]> {
        let i = self.index_of(id)?;
        self.features.as_ref().map(|f| f.row(i))
    }

    /// Number of classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.label)
            .max()
            .map_or(0, |c| c + 1)
    }

    pub fn original_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes
            .iter()
            .filter(|n| !n.origin.is_generated())
            .map(|n| &n.id)
    }

    pub fn generated_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.origin.is_generated())
            .map(|n| &n.id)
    }

    pub fn num_original(&self) -> usize {
        self.original_ids().count()
    }

    pub fn num_generated(&self) -> usize {
        self.generated_ids().count()
    }

    /// Neighbors of `id` in ascending id order.
    pub fn neighbors(&self, id: &NodeId) -> Vec<&NodeId> {
        let mut out: Vec<&NodeId> = self.edges.iter().filter_map(|e| e.other(id)).collect();
        out.sort();
        out
    }

    /// Original-origin neighbors of `id` in ascending id order.
    pub fn original_neighbors(&self, id: &NodeId) -> Vec<&NodeId> {
        self.neighbors(id)
            .into_iter()
            .filter(|n| self.node(n).is_some_and(|node| !node.origin.is_generated()))
            .collect()
    }

    /// Generated nodes whose center is `center`, in node order.
    pub fn generated_for(&self, center: &NodeId) -> Vec<&NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.origin, Origin::Generated { center: c } if c == center))
            .map(|n| &n.id)
            .collect()
    }

    pub fn split_mask(&self, split: Split) -> Vec<bool> {
        self.nodes.iter().map(|n| n.split == split).collect()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    /// Appends a generated neighbor for `center` and connects it to the
    /// center. Ids have the form `g{client}:{center}:{seq}`.
    pub fn add_generated_node(
        &mut self,
        center: &NodeId,
        title: &str,
        abstract_text: &str,
        feature: &[f32],
    ) -> Result<NodeId> {
        let center_node = self
            .node(center)
            .ok_or_else(|| GraphError::UnknownNode(center.clone()))?;
        if center_node.origin.is_generated() {
            return Err(GraphError::NotOriginal(center.clone()));
        }
        let features = self.features.as_mut().ok_or(GraphError::FeaturesMissing)?;
        if feature.len() != features.dim() {
            return Err(GraphError::DimensionMismatch {
                expected: features.dim(),
                actual: feature.len(),
            });
        }
        let seq = self.next_seq.entry(center.clone()).or_insert(0);
        let id = NodeId(format!("g{}:{}:{}", self.client_tag, center, *seq));
        *seq += 1;
        if self.index.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        features.push_row(feature);
        self.index.insert(id.clone(), self.nodes.len());
        self.nodes.push(Node {
            id: id.clone(),
            title: title.to_string(),
            abstract_text: abstract_text.to_string(),
            label: None,
            split: Split::None,
            origin: Origin::Generated {
                center: center.clone(),
            },
        });
        self.edges.insert(Edge::new(id.clone(), center.clone()).expect("fresh id"));
        Ok(id)
    }

    /// Removes a generated node with all its incident edges.
    pub fn remove_generated_node(&mut self, id: &NodeId) -> Result<Node> {
        let idx = self
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
        if !self.nodes[idx].origin.is_generated() {
            return Err(GraphError::NotGenerated(id.clone()));
        }
        self.edges.retain(|e| !e.touches(id));
        let node = self.nodes.remove(idx);
        if let Some(f) = self.features.as_mut() {
            f.remove_row(idx);
        }
        self.index.remove(id);
        for (i, n) in self.nodes.iter().enumerate().skip(idx) {
            self.index.insert(n.id.clone(), i);
        }
        Ok(node)
    }

    /// Swaps a generated node for a freshly generated one attached to the same
    /// center. Predicted edges of the old node are dropped; the caller is
    /// responsible for inferring new ones.
    pub fn replace_generated_node(
        &mut self,
        old: &NodeId,
        title: &str,
        abstract_text: &str,
        feature: &[f32],
    ) -> Result<NodeId> {
        let center = match self.node(old).map(|n| &n.origin) {
            Some(Origin::Generated { center }) => center.clone(),
            Some(Origin::Original) => return Err(GraphError::NotGenerated(old.clone())),
            None => return Err(GraphError::UnknownNode(old.clone())),
        };
        if let Some(dim) = self.feature_dim() {
            if feature.len() != dim {
                return Err(GraphError::DimensionMismatch {
                    expected: dim,
                    actual: feature.len(),
                });
            }
        }
        self.remove_generated_node(old)?;
        self.add_generated_node(&center, title, abstract_text, feature)
    }

    /// Unions `delta` into the edge set and returns how many edges were new.
    pub fn apply_edge_delta(&mut self, delta: &EdgeDelta) -> Result<usize> {
        for e in &delta.added_edges {
            for id in [&e.a, &e.b] {
                if !self.index.contains_key(id) {
                    return Err(GraphError::UnknownNode(id.clone()));
                }
            }
        }
        let mut added = 0;
        for e in &delta.added_edges {
            if self.insert_edge(e.a.clone(), e.b.clone())? {
                added += 1;
            }
        }
        Ok(added)
    }

    /// Checks every structural invariant; used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(&n.id, i).is_some() {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
            if self.index.get(&n.id) != Some(&i) {
                return Err(GraphError::UnknownNode(n.id.clone()));
            }
            match &n.origin {
                Origin::Original if n.split.is_labeled_split() && n.label.is_none() => {
                    return Err(GraphError::MissingLabel(n.id.clone()))
                }
                Origin::Generated { center } => {
                    if n.split != Split::None || n.label.is_some() {
                        return Err(GraphError::LabeledGenerated(n.id.clone()));
                    }
                    if !self.contains(center) {
                        return Err(GraphError::DanglingEndpoint(center.clone()));
                    }
                }
                _ => {}
            }
        }
        if self.index.len() != self.nodes.len() {
            return Err(GraphError::FeatureRowMismatch {
                declared: self.index.len(),
                nodes: self.nodes.len(),
            });
        }
        for e in &self.edges {
            if e.lo >= e.hi {
                return Err(GraphError::SelfLoop(e.lo.clone()));
            }
            for id in [&e.lo, &e.hi] {
                if !self.contains(id) {
                    return Err(GraphError::DanglingEndpoint(id.clone()));
                }
            }
        }
        if let Some(f) = &self.features {
            if f.rows() != self.nodes.len() {
                return Err(GraphError::FeatureRowMismatch {
                    declared: f.rows(),
                    nodes: self.nodes.len(),
                });
            }
        }
        Ok(())
    }

    /// Graph restricted to original nodes and the edges among them.
    pub fn original_projection(&self) -> TextAttributedGraph {
        let keep: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| !self.nodes[i].origin.is_generated())
            .collect();
        self.induced(&keep)
    }

    /// Subgraph on the given node indices (kept in the given order).
    pub fn induced(&self, keep: &[usize]) -> TextAttributedGraph {
        let nodes: Vec<Node> = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let mut g = TextAttributedGraph::new(nodes).expect("subset of a valid graph");
        g.client_tag = self.client_tag;
        for e in &self.edges {
            if g.contains(&e.lo) && g.contains(&e.hi) {
                g.edges.insert(e.clone());
            }
        }
        if let Some(f) = &self.features {
            let mut data = Vec::with_capacity(keep.len() * f.dim());
            for &i in keep {
                data.extend_from_slice(f.row(i));
            }
            g.features = Some(FeatureMatrix { dim: f.dim(), data });
        }
        g
    }
}

fn parse_generated_seq(id: &NodeId) -> Option<u32> {
    id.as_str().rsplit(':').next()?.parse().ok()
}

#[derive(Serialize, Deserialize)]
struct NodeLine {
    id: NodeId,
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    label: Option<usize>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceLine {
    id: NodeId,
    center: NodeId,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open_required(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    File::open(path).map_err(io_err(path))
}

/// Loads and validates a dataset directory.
pub fn load_graph(dir: &Path) -> Result<TextAttributedGraph> {
    let nodes_path = dir.join(NODES_FILE);
    let edges_path = dir.join(EDGES_FILE);
    let nodes_file = open_required(&nodes_path)?;
    let edges_file = open_required(&edges_path)?;

    let mut provenance: HashMap<NodeId, NodeId> = HashMap::new();
    let prov_path = dir.join(PROVENANCE_FILE);
    if prov_path.exists() {
        let reader = BufReader::new(File::open(&prov_path).map_err(io_err(&prov_path))?);
        for (ln, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&prov_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: ProvenanceLine = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
                file: PROVENANCE_FILE.into(),
                line: ln + 1,
                message: e.to_string(),
            })?;
            provenance.insert(p.id, p.center);
        }
    }

    let mut nodes = Vec::new();
    for (ln, line) in BufReader::new(nodes_file).lines().enumerate() {
        let line = line.map_err(io_err(&nodes_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let n: NodeLine = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            file: NODES_FILE.into(),
            line: ln + 1,
            message: e.to_string(),
        })?;
        let origin = match provenance.remove(&n.id) {
            Some(center) => Origin::Generated { center },
            None => Origin::Original,
        };
        nodes.push(Node {
            id: n.id,
            title: n.title,
            abstract_text: n.abstract_text,
            label: n.label,
            split: n.split,
            origin,
        });
    }
    if let Some(id) = provenance.into_keys().min() {
        return Err(GraphError::UnknownNode(id));
    }
    let mut g = TextAttributedGraph::new(nodes)?;

    let mut skipped_loops = 0usize;
    let mut duplicates = 0usize;
    for (ln, line) in BufReader::new(edges_file).lines().enumerate() {
        let line = line.map_err(io_err(&edges_path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (NodeId::from(a), NodeId::from(b)),
            _ => {
                return Err(GraphError::Parse {
                    file: EDGES_FILE.into(),
                    line: ln + 1,
                    message: "expected two tab-separated ids".into(),
                })
            }
        };
        match g.insert_edge(a, b) {
            Ok(true) => {}
            Ok(false) => duplicates += 1,
            Err(GraphError::SelfLoop(_)) => skipped_loops += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped_loops > 0 || duplicates > 0 {
        log::warn!(
            "{}: skipped {skipped_loops} self-loops and {duplicates} duplicate edges",
            edges_path.display()
        );
    }

    let feat_path = dir.join(FEATURES_FILE);
    if feat_path.exists() {
        let features = read_features(&feat_path)?;
        g.set_features(features)?;
    }
    g.validate()?;
    Ok(g)
}

/// Reads a `features.f32` file.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(io_err(path))?;
    let bad_header = || GraphError::Parse {
        file: FEATURES_FILE.into(),
        line: 1,
        message: format!("bad header {:?}", header.trim_end()),
    };
    let mut dim = None;
    let mut count = None;
    for tok in header.split_whitespace() {
        if let Some(v) = tok.strip_prefix("d=") {
            dim = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("n=") {
            count = v.parse::<usize>().ok();
        }
    }
    let (dim, count) = match (dim, count) {
        (Some(d), Some(n)) if d > 0 => (d, n),
        _ => return Err(bad_header()),
    };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() != dim * count * 4 {
        return Err(GraphError::DimensionMismatch {
            expected: dim * count * 4,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(dim, data)
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(w, "d={} n={}\n", features.dim(), features.rows()).map_err(io_err(path))?;
    for v in features.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `g` in the dataset directory layout. Output bytes depend only on
/// the graph contents.
pub fn save_graph(g: &TextAttributedGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let nodes_path = dir.join(NODES_FILE);
    let mut w = BufWriter::new(File::create(&nodes_path).map_err(io_err(&nodes_path))?);
    for n in &g.nodes {
        let line = NodeLine {
            id: n.id.clone(),
            title: n.title.clone(),
            abstract_text: n.abstract_text.clone(),
            label: n.label,
            split: n.split,
        };
        let s = serde_json::to_string(&line).expect("node line serializes");
        writeln!(w, "{s}").map_err(io_err(&nodes_path))?;
    }
    w.flush().map_err(io_err(&nodes_path))?;

    let edges_path = dir.join(EDGES_FILE);
    let mut w = BufWriter::new(File::create(&edges_path).map_err(io_err(&edges_path))?);
    for e in &g.edges {
        writeln!(w, "{}\t{}", e.lo, e.hi).map_err(io_err(&edges_path))?;
    }
    w.flush().map_err(io_err(&edges_path))?;

    let feat_path = dir.join(FEATURES_FILE);
    match &g.features {
        Some(f) => write_features(&feat_path, f)?,
        None if feat_path.exists() => fs::remove_file(&feat_path).map_err(io_err(&feat_path))?,
        None => {}
    }

    let prov_path = dir.join(PROVENANCE_FILE);
    let generated: Vec<&Node> = g.nodes.iter().filter(|n| n.origin.is_generated()).collect();
    if generated.is_empty() {
        if prov_path.exists() {
            fs::remove_file(&prov_path).map_err(io_err(&prov_path))?;
        }
    } else {
        let mut w = BufWriter::new(File::create(&prov_path).map_err(io_err(&prov_path))?);
        for n in generated {
            if let Origin::Generated { center } = &n.origin {
                let line = ProvenanceLine {
                    id: n.id.clone(),
                    center: center.clone(),
                };
                let s = serde_json::to_string(&line).expect("provenance serializes");
                writeln!(w, "{s}").map_err(io_err(&prov_path))?;
            }
        }
        w.flush().map_err(io_err(&prov_path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn original(id: &str, split: Split, label: Option<usize>) -> Node {
        Node {
            id: id.into(),
            title: format!("title {id}"),
            abstract_text: format!("abstract {id}"),
            label,
            split,
            origin: Origin::Original,
        }
    }

    fn five_node_graph() -> TextAttributedGraph {
        let nodes = (0..5)
            .map(|i| original(&format!("n{i}"), Split::Train, Some(i % 2)))
            .collect();
        let mut g = TextAttributedGraph::new(nodes)
            .unwrap()
            .with_edges([("n0".into(), "n1".into()), ("n1".into(), "n2".into())])
            .unwrap();
        let rows: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 1.0]).collect();
        g.set_features(FeatureMatrix::from_rows(2, &rows).unwrap()).unwrap();
        g
    }

    #[test]
    fn add_generated_node_appends_with_direct_edge() {
        let mut g = five_node_graph();
        let edges_before = g.num_edges();
        let id = g.add_generated_node(&"n0".into(), "t", "a", &[0.5, 0.5]).unwrap();
        assert_eq!(g.num_nodes(), 6);
        assert_eq!(g.num_edges(), edges_before + 1);
        assert!(g.has_edge(&id, &"n0".into()));
        let node = g.node(id.as_str()).unwrap();
        assert_eq!(node.split, Split::None);
        assert_eq!(node.label, None);
        assert_eq!(id.as_str(), "g0:n0:0");
        g.validate().unwrap();
    }

    #[test]
    fn add_generated_node_rejects_wrong_dimension() {
        let mut g = five_node_graph();
        let err = g.add_generated_node(&"n0".into(), "t", "a", &[1.0]).unwrap_err();
        assert!(matches!(err, GraphError::DimensionMismatch { expected: 2, actual: 1 }));
        assert_eq!(g.num_nodes(), 5);
    }

    #[test]
    fn add_generated_node_rejects_unknown_center() {
        let mut g = five_node_graph();
        let err = g.add_generated_node(&"zz".into(), "t", "a", &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, GraphError::UnknownNode(_)));
    }

    #[test]
    fn two_additions_get_distinct_ids() {
        let mut g = five_node_graph();
        let a = g.add_generated_node(&"n3".into(), "t", "a", &[0.0, 1.0]).unwrap();
        let b = g.add_generated_node(&"n3".into(), "t", "a", &[0.0, 1.0]).unwrap();
        assert_ne!(a, b);
        assert!(g.has_edge(&a, &"n3".into()));
        assert!(g.has_edge(&b, &"n3".into()));
        assert_eq!(g.generated_for(&"n3".into()).len(), 2);
    }

    #[test]
    fn replace_only_generated_node_drops_its_predicted_edges() {
        let mut g = five_node_graph();
        let old = g.add_generated_node(&"n0".into(), "t", "a", &[1.0, 0.0]).unwrap();
        g.insert_edge(old.clone(), "n4".into()).unwrap();
        let n = g.num_nodes();
        let new = g.replace_generated_node(&old, "t2", "a2", &[0.0, 1.0]).unwrap();
        assert_eq!(g.num_nodes(), n);
        assert!(!g.contains(old.as_str()));
        assert!(!g.has_edge(&new, &"n4".into()));
        assert_eq!(g.neighbors(&new), vec![&NodeId::from("n0")]);
        g.validate().unwrap();
    }

    #[test]
    fn replace_removes_exactly_three_predicted_edges() {
        let mut g = five_node_graph();
        let old = g.add_generated_node(&"n1".into(), "t", "a", &[1.0, 0.0]).unwrap();
        for other in ["n2", "n3", "n4"] {
            g.insert_edge(old.clone(), other.into()).unwrap();
        }
        let before: BTreeSet<Edge> = g.edges().cloned().collect();
        let new = g.replace_generated_node(&old, "t", "a", &[1.0, 0.0]).unwrap();
        let after: BTreeSet<Edge> = g.edges().cloned().collect();
        let removed: Vec<&Edge> = before.difference(&after).collect();
        let added: Vec<&Edge> = after.difference(&before).collect();
        // 3 predicted + 1 direct removed, 1 direct added
        assert_eq!(removed.len(), 4);
        assert!(removed.iter().all(|e| e.touches(&old)));
        assert_eq!(added, vec![&Edge::new(new, "n1".into()).unwrap()]);
    }

    #[test]
    fn replace_keeps_one_direct_edge_per_live_generated_neighbor() {
        let mut g = five_node_graph();
        let a = g.add_generated_node(&"n2".into(), "t", "a", &[1.0, 0.0]).unwrap();
        let _b = g.add_generated_node(&"n2".into(), "t", "a", &[1.0, 0.0]).unwrap();
        g.replace_generated_node(&a, "t", "a", &[1.0, 1.0]).unwrap();
        let center: NodeId = "n2".into();
        let live = g.generated_for(&center);
        assert_eq!(live.len(), 2);
        let direct = g
            .neighbors(&center)
            .into_iter()
            .filter(|n| g.node(n).unwrap().origin.is_generated())
            .count();
        assert_eq!(direct, live.len());
    }

    #[test]
    fn replace_rejects_original_node() {
        let mut g = five_node_graph();
        let err = g.replace_generated_node(&"n1".into(), "t", "a", &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, GraphError::NotGenerated(_)));
    }

    #[test]
    fn apply_edge_delta_counts_only_novel_edges() {
        let mut g = five_node_graph();
        let e = |a: &str, b: &str| AddedEdge {
            a: a.into(),
            b: b.into(),
            score: 0.5,
            kind: EdgeKind::Predicted,
        };
        let three = EdgeDelta {
            added_edges: vec![e("n0", "n3"), e("n0", "n4"), e("n3", "n4")],
        };
        assert_eq!(g.apply_edge_delta(&three).unwrap(), 3);
        let dup = EdgeDelta {
            added_edges: vec![e("n1", "n0")],
        };
        assert_eq!(g.apply_edge_delta(&dup).unwrap(), 0);
        let mixed = EdgeDelta {
            added_edges: vec![e("n2", "n4"), e("n1", "n3"), e("n2", "n1")],
        };
        assert_eq!(g.apply_edge_delta(&mixed).unwrap(), 2);
        let bad = EdgeDelta {
            added_edges: vec![e("n2", "x9")],
        };
        assert!(matches!(g.apply_edge_delta(&bad), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn labeled_split_requires_label() {
        let err = TextAttributedGraph::new(vec![original("a", Split::Test, None)]).unwrap_err();
        assert!(matches!(err, GraphError::MissingLabel(_)));
    }

    fn write_dataset(dir: &Path, nodes: &str, edges: &str) {
        fs::write(dir.join(NODES_FILE), nodes).unwrap();
        fs::write(dir.join(EDGES_FILE), edges).unwrap();
    }

    const TWO_NODES: &str = concat!(
        r#"{"id":"a","title":"A","abstract":"x","label":0,"split":"train"}"#,
        "\n",
        r#"{"id":"b","title":"B","abstract":"y","label":null,"split":"none"}"#,
        "\n"
    );

    #[test]
    fn load_with_empty_edges_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), TWO_NODES, "");
        let g = load_graph(dir.path()).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn load_rejects_dangling_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), TWO_NODES, "a\tx9\n");
        let err = load_graph(dir.path()).unwrap_err();
        assert!(matches!(err, GraphError::DanglingEndpoint(id) if id.as_str() == "x9"));
    }

    #[test]
    fn load_rejects_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = format!("{TWO_NODES}{}\n", r#"{"id":"a","title":"","abstract":"","label":null,"split":"none"}"#);
        write_dataset(dir.path(), &nodes, "");
        assert!(matches!(load_graph(dir.path()), Err(GraphError::DuplicateId(_))));
    }

    #[test]
    fn load_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(NODES_FILE), TWO_NODES).unwrap();
        assert!(matches!(load_graph(dir.path()), Err(GraphError::MissingFile(_))));
    }

    #[test]
    fn load_rejects_feature_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), TWO_NODES, "a\tb\n");
        let mut bytes = b"d=3 n=2\n".to_vec();
        bytes.extend(std::iter::repeat_n(0u8, 4 * 5));
        fs::write(dir.path().join(FEATURES_FILE), bytes).unwrap();
        assert!(matches!(
            load_graph(dir.path()),
            Err(GraphError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn save_then_load_round_trips_augmented_graph() {
        let mut g = five_node_graph();
        g.set_client_tag(3);
        let gen = g.add_generated_node(&"n4".into(), "gt", "ga", &[0.25, -1.5]).unwrap();
        g.insert_edge(gen, "n2".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path()).unwrap();
        let mut loaded = load_graph(dir.path()).unwrap();
        loaded.set_client_tag(3);
        assert_eq!(loaded.nodes(), g.nodes());
        assert_eq!(loaded.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        assert_eq!(loaded.features(), g.features());
        // sequence counter restored from provenance
        let next = loaded.add_generated_node(&"n4".into(), "t", "a", &[0.0, 0.0]).unwrap();
        assert_eq!(next.as_str(), "g3:n4:1");
    }
}

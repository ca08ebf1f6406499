//! Attributed graphs and train/test tasks.

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) has an endpoint outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("edge list is not canonical at position {0} (need i<j, sorted, unique)")]
    NonCanonicalEdges(usize),
    #[error("label {label} of node {node} is outside 0..{classes}")]
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    #[error("feature matrix has {rows} rows for {n} nodes")]
    FeatureRows { rows: usize, n: usize },
    #[error("label vector has {0} entries for {1} nodes")]
    LabelCount(usize, usize),
    #[error("graph has no edges")]
    NoEdges,
    #[error("invalid split: {0}")]
    Split(String),
}

/// Sorts, deduplicates, and orients pairs as `i < j`, dropping self-loops.
pub fn canonicalize_edges(pairs: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = pairs
        .into_iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn check_canonical_edges(n: usize, edges: &[(usize, usize)]) -> Result<(), GraphError> {
    for (k, &(i, j)) in edges.iter().enumerate() {
        if i >= n || j >= n {
            return Err(GraphError::EdgeOutOfRange(i, j, n));
        }
        if i >= j || (k > 0 && edges[k - 1] >= (i, j)) {
            return Err(GraphError::NonCanonicalEdges(k));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub n: usize,
    /// Canonical undirected edges: `i < j`, sorted, unique.
    pub edges: Vec<(usize, usize)>,
    /// `n × d` node features.
    pub x: Matrix,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl Graph {
    pub fn new(
        edges: Vec<(usize, usize)>,
        x: Matrix,
        y: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, GraphError> {
        let n = y.len();
        if x.rows != n {
            return Err(GraphError::FeatureRows { rows: x.rows, n });
        }
        check_canonical_edges(n, &edges)?;
        for (node, &label) in y.iter().enumerate() {
            if label >= n_classes {
                return Err(GraphError::LabelOutOfRange { node, label, classes: n_classes });
            }
        }
        Ok(Self { n, edges, x, y, n_classes })
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Graph {
        let mut x = Matrix::zeros(self.n, self.x.cols);
        let mut y = vec![0; self.n];
        for v in 0..self.n {
            x.row_mut(perm[v]).copy_from_slice(self.x.row(v));
            y[perm[v]] = self.y[v];
        }
        let edges = canonicalize_edges(self.edges.iter().map(|&(i, j)| (perm[i], perm[j])));
        Graph { n: self.n, edges, x, y, n_classes: self.n_classes }
    }
}

/// Fraction of edges whose endpoints share a label.
pub fn edge_homophily(edges: &[(usize, usize)], labels: &[usize]) -> Result<f64, GraphError> {
    if edges.is_empty() {
        return Err(GraphError::NoEdges);
    }
    let same = edges.iter().filter(|&&(i, j)| labels[i] == labels[j]).count();
    Ok(same as f64 / edges.len() as f64)
}

impl Graph {
    pub fn edge_homophily(&self) -> Result<f64, GraphError> {
        edge_homophily(&self.edges, &self.y)
    }
}

/// A graph with a train/test partition of its nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub graph: Graph,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Task {
    pub fn new(graph: Graph, train_ids: Vec<usize>, test_ids: Vec<usize>) -> Result<Self, GraphError> {
        validate_split(graph.n, &train_ids, &test_ids)?;
        Ok(Self { graph, train_ids, test_ids })
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train_ids.iter().map(|&i| self.graph.y[i]).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test_ids.iter().map(|&i| self.graph.y[i]).collect()
    }

    /// True if every label among test nodes also occurs among train nodes.
    pub fn test_classes_covered(&self) -> bool {
        let mut seen = vec![false; self.graph.n_classes];
        for &i in &self.train_ids {
            seen[self.graph.y[i]] = true;
        }
        self.test_ids.iter().all(|&i| seen[self.graph.y[i]])
    }

    /// Applies a node relabeling to the graph and both id lists.
    pub fn permute_nodes(&self, perm: &[usize]) -> Task {
        Task {
            graph: self.graph.permute_nodes(perm),
            train_ids: self.train_ids.iter().map(|&i| perm[i]).collect(),
            test_ids: self.test_ids.iter().map(|&i| perm[i]).collect(),
        }
    }

    /// Stable byte encoding, used to fingerprint tasks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.graph;
        let mut out = Vec::new();
        for v in [g.n, g.x.cols, g.n_classes, g.edges.len(), self.train_ids.len(), self.test_ids.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &(i, j) in &g.edges {
            out.extend_from_slice(&(i as u64).to_le_bytes());
            out.extend_from_slice(&(j as u64).to_le_bytes());
        }
        for v in &g.x.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ids in [&g.y, &self.train_ids, &self.test_ids] {
            for &v in ids {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        out
    }
}

pub fn validate_split(n: usize, train_ids: &[usize], test_ids: &[usize]) -> Result<(), GraphError> {
    if train_ids.is_empty() {
        return Err(GraphError::Split("train split is empty".into()));
    }
    let mut seen = vec![0u8; n];
    for (ids, tag) in [(train_ids, 1u8), (test_ids, 2u8)] {
        for &i in ids {
            if i >= n {
                return Err(GraphError::Split(format!("node {i} outside 0..{n}")));
            }
            if seen[i] != 0 {
                return Err(GraphError::Split(format!("node {i} listed twice")));
            }
            seen[i] = tag;
        }
    }
    Ok(())
}

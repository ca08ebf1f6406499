//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NPFNDSET" | u32 version | u8 directed (always 0)
//! u64 n | u64 d | u32 classes | u64 edges | u8 flags (1 = predictions, 2 = metadata)
//! f64 features, n × d row-major
//! i32 labels, n entries, −1 = unknown
//! u32 pairs, one (i, j) per edge, i < j, sorted
//! train bitmap, test bitmap: ⌈n/8⌉ bytes each, bit v%8 of byte v/8
//! [predictions: u64 rows | u32 k | u32 class ids… | f64 probabilities rows × k | i32 labels…]
//! [metadata: u64 len | JSON]
//! ```
//!
//! Prediction rows follow the test nodes in ascending id order.

use std::path::Path;

use super::bytes::{field_err, ByteReader, ByteWriter};
use super::{write_atomic, FormatError};
use crate::graph::{check_canonical_edges, Graph, Task};
use crate::linalg::Matrix;

pub const DATASET_MAGIC: &[u8; 8] = b"NPFNDSET";
pub const DATASET_VERSION: u32 = 1;

const FLAG_PREDICTIONS: u8 = 1;
const FLAG_META: u8 = 2;

/// Per-test-node class distribution and argmax labels in original label ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBlock {
    /// Original label of each probability column.
    pub classes: Vec<u32>,
    /// `|test| × classes.len()`
    pub probs: Matrix,
    pub labels: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub n_classes: usize,
    pub x: Matrix,
    /// −1 marks an unknown label.
    pub labels: Vec<i32>,
    pub edges: Vec<(usize, usize)>,
    /// Ascending.
    pub train_ids: Vec<usize>,
    /// Ascending.
    pub test_ids: Vec<usize>,
    pub predictions: Option<PredictionBlock>,
    pub meta: Option<serde_json::Value>,
}

impl DatasetFile {
    pub fn n(&self) -> usize {
        self.x.rows
    }

    pub fn from_task(task: &Task) -> Self {
        let g = &task.graph;
        let mut train_ids = task.train_ids.clone();
        let mut test_ids = task.test_ids.clone();
        train_ids.sort_unstable();
        test_ids.sort_unstable();
        Self {
            n_classes: g.n_classes,
            x: g.x.clone(),
            labels: g.y.iter().map(|&c| c as i32).collect(),
            edges: g.edges.clone(),
            train_ids,
            test_ids,
            predictions: None,
            meta: None,
        }
    }

    /// Labels of the train nodes, in `train_ids` order.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train_ids.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Test labels when every test node is labeled.
    pub fn test_labels(&self) -> Option<Vec<usize>> {
        self.test_ids.iter().map(|&i| usize::try_from(self.labels[i]).ok()).collect()
    }

    /// Fully labeled datasets convert back into a [`Task`].
    pub fn to_task(&self) -> Result<Task, FormatError> {
        let y = self
            .labels
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| FormatError::Invalid("dataset has unknown labels".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let g = Graph::new(self.edges.clone(), self.x.clone(), y, self.n_classes)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        Task::new(g, self.train_ids.clone(), self.test_ids.clone()).map_err(|e| FormatError::Invalid(e.to_string()))
    }

    /// Checks every invariant the loader enforces.
    pub fn validate(&self) -> Result<(), FormatError> {
        let n = self.n();
        let inv = |m: String| Err(FormatError::Invalid(m));
        if self.labels.len() != n {
            return inv(format!("{} labels for {} nodes", self.labels.len(), n));
        }
        if let Some((v, &l)) = self.labels.iter().enumerate().find(|&(_, &l)| l < -1 || l >= self.n_classes as i32) {
            return inv(format!("label {l} of node {v} outside [-1, {})", self.n_classes));
        }
        check_canonical_edges(n, &self.edges).map_err(|e| FormatError::Invalid(e.to_string()))?;
        for ids in [&self.train_ids, &self.test_ids] {
            if ids.windows(2).any(|w| w[0] >= w[1]) || ids.last().is_some_and(|&v| v >= n) {
                return inv("split ids must be ascending, unique and in range".into());
            }
        }
        let mut in_train = vec![false; n];
        self.train_ids.iter().for_each(|&v| in_train[v] = true);
        if let Some(&v) = self.test_ids.iter().find(|&&v| in_train[v]) {
            return inv(format!("mask overlap: node {v} is in both train and test"));
        }
        if let Some(&v) = self.train_ids.iter().find(|&&v| self.labels[v] < 0) {
            return inv(format!("train node {v} has no label"));
        }
        if let Some(p) = &self.predictions {
            if p.probs.rows != self.test_ids.len() || p.labels.len() != self.test_ids.len() || p.probs.cols != p.classes.len() {
                return inv("prediction block shape does not match the test split".into());
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut w = ByteWriter::default();
        w.raw(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u8(0);
        w.u64(n as u64);
        w.u64(self.x.cols as u64);
        w.u32(self.n_classes as u32);
        w.u64(self.edges.len() as u64);
        let flags = if self.predictions.is_some() { FLAG_PREDICTIONS } else { 0 } | if self.meta.is_some() { FLAG_META } else { 0 };
        w.u8(flags);
        self.x.data.iter().for_each(|&v| w.f64(v));
        self.labels.iter().for_each(|&l| w.i32(l));
        for &(i, j) in &self.edges {
            w.u32(i as u32);
            w.u32(j as u32);
        }
        for ids in [&self.train_ids, &self.test_ids] {
            let mut bits = vec![0u8; n.div_ceil(8)];
            ids.iter().for_each(|&v| bits[v / 8] |= 1 << (v % 8));
            w.raw(&bits);
        }
        if let Some(p) = &self.predictions {
            w.u64(p.probs.rows as u64);
            w.u32(p.classes.len() as u32);
            p.classes.iter().for_each(|&c| w.u32(c));
            p.probs.data.iter().for_each(|&v| w.f64(v));
            p.labels.iter().for_each(|&l| w.i32(l));
        }
        if let Some(m) = &self.meta {
            w.blob(&serde_json::to_vec(m).expect("metadata serializes"));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        if r.take(8).ok() != Some(DATASET_MAGIC.as_slice()) {
            return Err(FormatError::Magic { expected: "dataset" });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(FormatError::Version { kind: "dataset", found: version, supported: DATASET_VERSION });
        }
        let at = r.pos;
        if r.u8()? != 0 {
            return Err(field_err("directed", at, "directed graphs are not supported"));
        }
        let at = r.pos;
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let n_classes = r.u32()? as usize;
        let n_edges = r.u64()? as usize;
        let need = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(8))
            .and_then(|b| b.checked_add(n.checked_mul(4)?))
            .and_then(|b| b.checked_add(n_edges.checked_mul(8)?));
        if need.is_none_or(|b| b > r.remaining()) {
            return Err(field_err("header", at, format!("n={n}, d={d}, edges={n_edges} exceed the file size")));
        }
        let at = r.pos;
        let flags = r.u8()?;
        if flags & !(FLAG_PREDICTIONS | FLAG_META) != 0 {
            return Err(field_err("flags", at, format!("unknown flag bits {flags:#04x}")));
        }

        let mut xs = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let at = r.pos;
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(field_err("features", at, "non-finite value"));
            }
            xs.push(v);
        }
        let mut labels = Vec::with_capacity(n);
        for v in 0..n {
            let at = r.pos;
            let l = r.i32()?;
            if l < -1 || l >= n_classes as i32 {
                return Err(field_err("labels", at, format!("label {l} of node {v} outside [-1, {n_classes})")));
            }
            labels.push(l);
        }
        let edge_start = r.pos;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            edges.push((r.u32()? as usize, r.u32()? as usize));
        }
        if let Err(e) = check_canonical_edges(n, &edges) {
            return Err(field_err("edges", edge_start, e.to_string()));
        }
        let mask_len = n.div_ceil(8);
        let mut split = Vec::new();
        for name in ["train_mask", "test_mask"] {
            let at = r.pos;
            let bits = r.take(mask_len)?;
            let ids: Vec<usize> = (0..n).filter(|&v| bits[v / 8] >> (v % 8) & 1 == 1).collect();
            if n % 8 != 0 && bits[mask_len - 1] >> (n % 8) != 0 {
                return Err(field_err(name, at, "bits set beyond the node count"));
            }
            split.push((ids, at));
        }
        let (test_ids, test_at) = split.pop().expect("two masks");
        let (train_ids, _) = split.pop().expect("two masks");
        let mut in_train = vec![false; n];
        train_ids.iter().for_each(|&v| in_train[v] = true);
        if let Some(&v) = test_ids.iter().find(|&&v| in_train[v]) {
            return Err(field_err("test_mask", test_at, format!("mask overlap: node {v} is in both train and test")));
        }

        let predictions = if flags & FLAG_PREDICTIONS != 0 {
            let at = r.pos;
            let rows = r.u64()? as usize;
            let k = r.u32()? as usize;
            if rows != test_ids.len() {
                return Err(field_err("predictions", at, format!("{rows} rows for {} test nodes", test_ids.len())));
            }
            if rows.saturating_mul(k).saturating_mul(8) > r.remaining() {
                return Err(FormatError::Truncated { offset: r.pos, needed: rows * k * 8 });
            }
            let classes = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let probs = (0..rows * k).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let plabels = (0..rows).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
            Some(PredictionBlock { classes, probs: Matrix::from_vec(rows, k, probs), labels: plabels })
        } else {
            None
        };
        let meta = if flags & FLAG_META != 0 {
            let at = r.pos;
            Some(serde_json::from_slice(r.blob("meta")?).map_err(|e| field_err("meta", at, e.to_string()))?)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(field_err("trailer", r.pos, format!("{} unexpected bytes", r.remaining())));
        }
        let ds = Self { n_classes, x: Matrix::from_vec(n, d, xs), labels, edges, train_ids, test_ids, predictions, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        self.validate()?;
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

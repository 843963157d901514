//! Attributed graphs with a binary sensitive attribute, binary labels and
//! train/val/test masks.

mod io;
mod split;
mod synth;

pub use io::{load_bundle, load_dataset, save_bundle, BundleMeta, NodeSchema};
pub use split::{make_splits, SplitSpec};
pub use synth::{gen_synthetic, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::engine::{CsrMatrix, Matrix};
use crate::{Error, Result};

/// Train/validation/test membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Validation(format!("masks must have length {n}")));
        }
        for i in 0..n {
            let hits = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if hits > 1 {
                return Err(Error::Validation(format!("node {i} belongs to more than one split")));
            }
        }
        Ok(())
    }
}

/// Immutable attributed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    adjacency: CsrMatrix,
    edge_count: usize,
    features: Matrix,
    feature_names: Vec<String>,
    sensitive: Vec<u8>,
    labels: Vec<u8>,
    masks: Masks,
    sensitive_column_index: Option<usize>,
    split_seed: Option<u64>,
}

impl GraphDataset {
    /// Builds a dataset from an undirected edge list. Self-loops are dropped
    /// and `(u, v)` / `(v, u)` duplicates collapse into one edge.
    pub fn from_edges(
        features: Matrix,
        sensitive: Vec<u8>,
        labels: Vec<u8>,
        edges: &[(usize, usize)],
        sensitive_column_index: Option<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u != v {
                pairs.push((u.min(v), u.max(v)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let adjacency = CsrMatrix::from_triplets(n, n, pairs.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]));
        let names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Self::new(
            adjacency,
            features,
            names,
            sensitive,
            labels,
            Masks::empty(n),
            sensitive_column_index,
        )
    }

    pub fn new(
        adjacency: CsrMatrix,
        features: Matrix,
        feature_names: Vec<String>,
        sensitive: Vec<u8>,
        labels: Vec<u8>,
        masks: Masks,
        sensitive_column_index: Option<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        if adjacency.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "adjacency shape {:?} does not match {n} nodes",
                adjacency.shape()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::Validation(
                "feature name count differs from feature width".into(),
            ));
        }
        if sensitive.len() != n || labels.len() != n {
            return Err(Error::Validation(format!(
                "sensitive ({}) and labels ({}) must have length {n}",
                sensitive.len(),
                labels.len()
            )));
        }
        if let Some(i) = sensitive.iter().position(|&s| s > 1) {
            return Err(Error::Validation(format!("sensitive value of node {i} is not binary")));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::Validation(format!("label of node {i} is not binary")));
        }
        let mut loops = 0;
        for i in 0..n {
            for (j, v) in adjacency.row(i) {
                if v != 1.0 {
                    return Err(Error::Validation(format!(
                        "adjacency entry ({i}, {j}) is {v}, expected 1"
                    )));
                }
                if i == j {
                    loops += 1;
                }
            }
        }
        if loops > 0 {
            return Err(Error::Validation("adjacency diagonal must be zero".into()));
        }
        if !adjacency.is_symmetric(0.0) {
            return Err(Error::Validation("adjacency must be symmetric".into()));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain non-finite values".into()));
        }
        if let Some(k) = sensitive_column_index {
            if k >= features.cols() {
                return Err(Error::Validation(format!("sensitive column {k} out of range")));
            }
            if let Some(i) = (0..n).find(|&i| features[(i, k)] != f64::from(sensitive[i])) {
                return Err(Error::Validation(format!(
                    "feature column {k} does not match the sensitive attribute at node {i}"
                )));
            }
        }
        masks.validate(n)?;
        let edge_count = adjacency.nnz() / 2;
        Ok(Self {
            adjacency,
            edge_count,
            features,
            feature_names,
            sensitive,
            labels,
            masks,
            sensitive_column_index,
            split_seed: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.features.cols() {
            return Err(Error::Validation(
                "feature name count differs from feature width".into(),
            ));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_masks(mut self, masks: Masks, split_seed: Option<u64>) -> Result<Self> {
        masks.validate(self.n())?;
        self.masks = masks;
        self.split_seed = split_seed;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    /// Undirected edge count.
    pub fn m(&self) -> usize {
        self.edge_count
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn sensitive_column_index(&self) -> Option<usize> {
        self.sensitive_column_index
    }

    pub fn split_seed(&self) -> Option<u64> {
        self.split_seed
    }

    /// Features with the sensitive column removed, if one is recorded.
    pub fn scrubbed_features(&self) -> Matrix {
        let Some(k) = self.sensitive_column_index else {
            return self.features.clone();
        };
        let d = self.d();
        let mut out = Matrix::zeros(self.n(), d - 1);
        for i in 0..self.n() {
            let src = self.features.row(i);
            let dst = out.row_mut(i);
            dst[..k].copy_from_slice(&src[..k]);
            dst[k..].copy_from_slice(&src[k + 1..]);
        }
        out
    }

    pub fn sensitive_f64(&self) -> Vec<f64> {
        self.sensitive.iter().map(|&s| f64::from(s)).collect()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| f64::from(y)).collect()
    }
}

/// Symmetric GCN normalization `D̂^{-1/2}(A + I)D̂^{-1/2}` where `D̂` is the
/// degree matrix of `A + I`. Isolated nodes keep a unit self-loop.
pub fn normalize_adjacency(g: &GraphDataset) -> CsrMatrix {
    let a = g.adjacency();
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((a.row_nnz(i) + 1) as f64).sqrt()).collect();
    let triplets = (0..n).flat_map(|i| {
        let inv_sqrt = &inv_sqrt;
        std::iter::once((i, i, inv_sqrt[i] * inv_sqrt[i]))
            .chain(a.row(i).map(move |(j, _)| (i, j, inv_sqrt[i] * inv_sqrt[j])))
    });
    CsrMatrix::from_triplets(n, n, triplets.collect::<Vec<_>>())
}

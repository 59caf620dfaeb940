//! Category-constrained k-nearest-neighbor correlation graphs.
//!
//! Every anchor keeps an ordered neighbor list that starts with the anchor
//! itself followed by up to `k - 1` label-compatible samples ranked by
//! cosine similarity. The adjacency matrix is the union of these directed
//! relations, so it is symmetric with a unit diagonal.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{labels_overlap, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("cosine_similarity", &[x.len()], &[y.len()]));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Similarity("zero-norm vector".into()));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

fn by_similarity(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Orders candidate rows of `embeddings` by descending cosine similarity to
/// row `q`, breaking ties by ascending index.
pub fn rank_neighbors(q: usize, candidates: &[usize], embeddings: &Tensor) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::contract("rank_neighbors needs at least one candidate"));
    }
    let query = embeddings.row(q);
    let mut scored = candidates
        .iter()
        .map(|&c| Ok((c, cosine_similarity(query, embeddings.row(c))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(by_similarity);
    Ok(scored.into_iter().map(|(c, _)| c).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub anchor: usize,
    /// Anchor first, then neighbors by descending similarity.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer than `k` entries were available under the category constraint.
    pub truncated: bool,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Where an anchor's neighbor candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborPool {
    /// Same modality as the anchor.
    #[default]
    IntraModal,
    /// The paired other modality.
    CrossModal,
}

impl NeighborPool {
    pub fn as_str(self) -> &'static str {
        match self {
            NeighborPool::IntraModal => "intra_modal",
            NeighborPool::CrossModal => "cross_modal",
        }
    }
}

impl std::str::FromStr for NeighborPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra_modal" => Ok(NeighborPool::IntraModal),
            "cross_modal" => Ok(NeighborPool::CrossModal),
            other => Err(Error::Config(format!("unknown neighbor pool {other:?}"))),
        }
    }
}

/// Selects the anchor plus its `k - 1` most similar label-compatible
/// candidates from `pool`. Zero-norm rows rank below everything and are
/// never selected.
pub fn knn_select(q: usize, k: usize, anchors: &Tensor, pool: &Tensor, labels: &[Vec<u8>]) -> Result<NeighborList> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if anchors.cols() != pool.cols() {
        return Err(Error::shape("knn_select", anchors.shape(), pool.shape()));
    }
    let query = anchors.row(q);
    let qn = norm(query);
    let mut scored: Vec<(usize, f64)> = Vec::new();
    if qn > 0.0 {
        for p in 0..pool.rows() {
            if p == q || !labels_overlap(&labels[q], &labels[p]) {
                continue;
            }
            let row = pool.row(p);
            let pn = norm(row);
            if pn == 0.0 {
                continue;
            }
            scored.push((p, (dot(query, row) / (qn * pn)).clamp(-1.0, 1.0)));
        }
    }
    scored.sort_by(by_similarity);
    let take = (k - 1).min(scored.len());
    let mut indices = Vec::with_capacity(take + 1);
    let mut scores = Vec::with_capacity(take + 1);
    indices.push(q);
    scores.push(1.0);
    for &(p, s) in &scored[..take] {
        indices.push(p);
        scores.push(s);
    }
    Ok(NeighborList {
        anchor: q,
        truncated: indices.len() < k,
        indices,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGraph {
    pub modality: Modality,
    pub pool: NeighborPool,
    pub k: usize,
    n: usize,
    adjacency: Vec<bool>,
    lists: Vec<NeighborList>,
}

impl CorrelationGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edge(&self, p: usize, q: usize) -> bool {
        self.adjacency[p * self.n + q]
    }

    pub fn adjacency_matrix(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|p| (0..self.n).map(|q| u8::from(self.edge(p, q))).collect())
            .collect()
    }

    pub fn neighbors(&self, anchor: usize) -> &NeighborList {
        &self.lists[anchor]
    }

    pub fn neighbor_lists(&self) -> &[NeighborList] {
        &self.lists
    }

    /// Debug dump: one `p,q,1` line per edge.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,q,value\n");
        for p in 0..self.n {
            for q in 0..self.n {
                if self.edge(p, q) {
                    let _ = writeln!(s, "{p},{q},1");
                }
            }
        }
        s
    }
}

impl CorrelationGraph {
    /// Builds a graph from precomputed neighbor lists, one per node in order.
    pub fn from_lists(
        modality: Modality,
        pool: NeighborPool,
        k: usize,
        labels: &[Vec<u8>],
        lists: Vec<NeighborList>,
    ) -> Result<Self> {
        if lists.len() != labels.len() || lists.iter().enumerate().any(|(i, l)| l.anchor != i) {
            return Err(Error::contract("neighbor lists must cover nodes 0..n in order"));
        }
        if lists.iter().flat_map(|l| &l.indices).any(|&j| j >= labels.len()) {
            return Err(Error::contract("neighbor index out of range"));
        }
        Ok(assemble(modality, pool, k, labels, lists))
    }
}

fn assemble(
    modality: Modality,
    pool: NeighborPool,
    k: usize,
    labels: &[Vec<u8>],
    lists: Vec<NeighborList>,
) -> CorrelationGraph {
    let n = lists.len();
    let mut adjacency = vec![false; n * n];
    for list in &lists {
        let q = list.anchor;
        for &p in &list.indices {
            if labels_overlap(&labels[p], &labels[q]) {
                adjacency[p * n + q] = true;
                adjacency[q * n + p] = true;
            }
        }
    }
    CorrelationGraph {
        modality,
        pool,
        k,
        n,
        adjacency,
        lists,
    }
}

/// Intra-modal graph over the rows of `embeddings`.
pub fn build_correlation_graph(
    embeddings: &Tensor,
    labels: &[Vec<u8>],
    k: usize,
    modality: Modality,
) -> Result<CorrelationGraph> {
    build_graph(embeddings, embeddings, labels, k, modality, NeighborPool::IntraModal)
}

/// Graph whose anchors are rows of `anchors` and whose candidates are rows
/// of `pool`. Both matrices index the same samples.
pub fn build_graph(
    anchors: &Tensor,
    pool: &Tensor,
    labels: &[Vec<u8>],
    k: usize,
    modality: Modality,
    pool_kind: NeighborPool,
) -> Result<CorrelationGraph> {
    let n = anchors.rows();
    if n == 0 {
        return Err(Error::contract("graph needs at least one sample"));
    }
    if pool.rows() != n || labels.len() != n {
        return Err(Error::contract(format!(
            "graph inputs disagree: {n} anchors, {} candidates, {} labels",
            pool.rows(),
            labels.len()
        )));
    }
    let lists = (0..n)
        .map(|q| knn_select(q, k, anchors, pool, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(modality, pool_kind, k, labels, lists))
}

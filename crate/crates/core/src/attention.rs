//! Anchor-aware proxies via scaled dot-product attention.
//!
//! For an anchor `x_i` of one modality, the query is its cross-modal
//! partner's projection and the keys are the anchor's neighbor list from
//! the correlation graph (anchor first). Two formulations are provided:
//!
//! * [`AaMode::Literal`]: one attention call per `(query, neighbor, anchor)`
//!   tuple, each with a single key, averaged over tuples. Because a softmax
//!   over one logit is exactly 1, the result is `anchor · W^V` projected by
//!   `W^O` no matter which neighbors or query are supplied.
//! * [`AaMode::Joint`]: one attention call with all neighbors as keys and
//!   values, giving a query-dependent convex mix of the neighbors.
//!
//! `W^O` is linear, so averaging per-tuple outputs before or after the
//! output projection agrees; the average is taken before it.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::graph::{CorrelationGraph, NeighborPool};
use crate::init::xavier_uniform;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AaMode {
    Literal,
    #[default]
    Joint,
}

impl AaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AaMode::Literal => "literal",
            AaMode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for AaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AaMode::Literal),
            "joint" => Ok(AaMode::Joint),
            other => Err(Error::Config(format!("unknown AA mode {other:?}"))),
        }
    }
}

/// Per-head projections `W^Q, W^K, W^V` (each `d x d_k`) and the output
/// projection `W^O` (`h*d_k x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide the label dimension {dim}"
            )));
        }
        let head_dim = dim / heads;
        let mut rng = seed::rng(seed, &[seed::STREAM_INIT, fxhash(prefix)]);
        let mut mk =
            |store: &mut ParamStore, name: String, r: usize, c: usize| store.add(name, xavier_uniform(r, c, &mut rng));
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..heads {
            wq.push(mk(store, format!("{prefix}.head{h}.wq"), dim, head_dim));
            wk.push(mk(store, format!("{prefix}.head{h}.wk"), dim, head_dim));
            wv.push(mk(store, format!("{prefix}.head{h}.wv"), dim, head_dim));
        }
        let wo = mk(store, format!("{prefix}.wo"), heads * head_dim, dim);
        Ok(Self {
            dim,
            heads,
            head_dim,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(3 * self.heads + 1);
        for h in 0..self.heads {
            ids.extend([self.wq[h], self.wk[h], self.wv[h]]);
        }
        ids.push(self.wo);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundAttention> {
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            heads.push(HeadVars {
                wq: tape.param(store, self.wq[h])?,
                wk: tape.param(store, self.wk[h])?,
                wv: tape.param(store, self.wv[h])?,
            });
        }
        Ok(BoundAttention {
            heads,
            wo: tape.param(store, self.wo)?,
            head_dim: self.head_dim,
        })
    }
}

// Stable string hash for deriving per-prefix init streams.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Attention parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub head_dim: usize,
}

/// `softmax((q W^Q)(K W^K)^T / sqrt(d_k)) (V W^V)` for a `1 x d` query and
/// `k x d` keys/values. Returns the `1 x d_k` output and `1 x k` weights.
pub fn scaled_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    head: HeadVars,
    head_dim: usize,
) -> Result<(Var, Var)> {
    let (k_rows, v_rows) = (tape.value(keys).rows(), tape.value(values).rows());
    if k_rows == 0 || k_rows != v_rows || tape.value(query).rows() != 1 {
        return Err(Error::shape(
            "scaled_attention",
            tape.value(keys).shape(),
            tape.value(values).shape(),
        ));
    }
    let q = tape.matmul(query, head.wq)?;
    let k = tape.matmul(keys, head.wk)?;
    let v = tape.matmul(values, head.wv)?;
    let (out, weights) = attend_projected(tape, q, k, v, head_dim)?;
    Ok((out, weights))
}

// Attention over already projected rows.
fn attend_projected(tape: &mut Tape, q: Var, k: Var, v: Var, head_dim: usize) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `Concat(A_1, ..., A_h) W^O` for a single query.
pub fn multi_head(tape: &mut Tape, query: Var, keys: Var, values: Var, attn: &BoundAttention) -> Result<Var> {
    let mut outs = Vec::with_capacity(attn.heads.len());
    for &head in &attn.heads {
        outs.push(scaled_attention(tape, query, keys, values, head, attn.head_dim)?.0);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, attn.wo)
}

/// Label-space projections of one batch, both modalities row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub audio: Var,
    pub visual: Var,
}

impl ProjectionVars {
    pub fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyBatch {
    /// `anchors.len() x d` proxies, one row per requested anchor.
    pub proxies: Var,
    /// Attention weights per anchor, per head (literal mode: one `1 x 1`
    /// weight per tuple, flattened in tuple order).
    pub weights: Vec<Vec<Var>>,
}

/// Proxies for the listed anchors of `modality`. Graph node `j` is row `j`
/// of the projection matrices.
pub fn aa_proxies(
    tape: &mut Tape,
    attn: &BoundAttention,
    projections: ProjectionVars,
    modality: Modality,
    graph: &CorrelationGraph,
    anchors: &[usize],
    mode: AaMode,
) -> Result<ProxyBatch> {
    let anchor_rows = projections.get(modality);
    let partner_rows = projections.get(modality.other());
    let n = tape.value(anchor_rows).rows();
    if graph.len() != n {
        return Err(Error::contract(format!(
            "graph has {} nodes but the batch has {n} rows",
            graph.len()
        )));
    }
    // Keys and values are gathered from `key_src`; in cross-modal pools the
    // candidate rows follow the anchor rows, offset by n.
    let (key_src, offset) = match graph.pool {
        NeighborPool::IntraModal => (anchor_rows, 0),
        NeighborPool::CrossModal => (tape.concat_rows(&[anchor_rows, partner_rows])?, n),
    };
    let key_index = |list_pos: usize, idx: usize| if list_pos == 0 { idx } else { idx + offset };

    let mut head_blocks = Vec::with_capacity(attn.heads.len());
    let mut weights: Vec<Vec<Var>> = vec![Vec::new(); anchors.len()];
    for &head in &attn.heads {
        let qw = tape.matmul(partner_rows, head.wq)?;
        let kw = tape.matmul(key_src, head.wk)?;
        let vw = tape.matmul(key_src, head.wv)?;
        let mut rows = Vec::with_capacity(anchors.len());
        for (slot, &i) in anchors.iter().enumerate() {
            let list = graph.neighbors(i);
            if list.is_empty() {
                return Err(Error::contract(format!("anchor {i} has an empty neighbor list")));
            }
            let keys: Vec<usize> = list.indices.iter().enumerate().map(|(p, &j)| key_index(p, j)).collect();
            let q = tape.gather_rows(qw, &[i])?;
            match mode {
                AaMode::Joint => {
                    let k = tape.gather_rows(kw, &keys)?;
                    let v = tape.gather_rows(vw, &keys)?;
                    let (out, w) = attend_projected(tape, q, k, v, attn.head_dim)?;
                    weights[slot].push(w);
                    rows.push(out);
                }
                AaMode::Literal => {
                    let v = tape.gather_rows(vw, &[i])?;
                    let mut tuples = Vec::with_capacity(keys.len());
                    for &kj in &keys {
                        let k = tape.gather_rows(kw, &[kj])?;
                        let (out, w) = attend_projected(tape, q, k, v, attn.head_dim)?;
                        weights[slot].push(w);
                        tuples.push(out);
                    }
                    let stacked = tape.concat_rows(&tuples)?;
                    rows.push(tape.mean_rows(stacked)?);
                }
            }
        }
        head_blocks.push(tape.stack_rows(&rows)?);
    }
    let cat = tape.concat_cols(&head_blocks)?;
    let proxies = tape.matmul(cat, attn.wo)?;
    Ok(ProxyBatch { proxies, weights })
}

/// Proxy of a single anchor evaluated outside training.
pub fn aa_proxy(
    anchor: usize,
    modality: Modality,
    audio: &Tensor,
    visual: &Tensor,
    graph: &CorrelationGraph,
    params: &AttentionParams,
    store: &ParamStore,
    mode: AaMode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let attn = params.bind(&mut tape, store)?;
    let proj = ProjectionVars {
        audio: tape.leaf(audio.clone())?,
        visual: tape.leaf(visual.clone())?,
    };
    let batch = aa_proxies(&mut tape, &attn, proj, modality, graph, &[anchor], mode)?;
    Ok(tape.value(batch.proxies).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_correlation_graph;

    fn identity_params(dim: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", dim, 1, 0).unwrap();
        for id in p.param_ids() {
            let n = store.value(id).rows();
            store.get_mut(id).value = Tensor::identity(n);
        }
        (store, p)
    }

    fn run_single(
        store: &ParamStore,
        p: &AttentionParams,
        q: &[f64],
        keys: &[[f64; 2]],
        values: &[[f64; 2]],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let a = p.bind(&mut t, store).unwrap();
        let qv = t.leaf(Tensor::from_rows(&[q]).unwrap()).unwrap();
        let kv = t.leaf(Tensor::from_rows(keys).unwrap()).unwrap();
        let vv = t.leaf(Tensor::from_rows(values).unwrap()).unwrap();
        let (o, w) = scaled_attention(&mut t, qv, kv, vv, a.heads[0], a.head_dim).unwrap();
        (t.value(o).data().to_vec(), t.value(w).data().to_vec())
    }

    #[test]
    fn single_key_weight_is_one() {
        let (store, p) = identity_params(2);
        let (_, w) = run_single(&store, &p, &[3.0, -1.0], &[[0.2, 7.0]], &[[1.0, 1.0]]);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn identical_keys_uniform_weights() {
        let (store, p) = identity_params(2);
        let (_, w) = run_single(&store, &p, &[3.0, -1.0], &[[0.5, 0.5]; 4], &[[1.0, 0.0]; 4]);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_two_key_example() {
        let (store, p) = identity_params(2);
        let (o, w) = run_single(
            &store,
            &p,
            &[1.0, 0.0],
            &[[1.0, 0.0], [0.0, 1.0]],
            &[[1.0, 0.0], [0.0, 1.0]],
        );
        // softmax([1/sqrt(2), 0])
        let e = (1.0 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((w[0] - w0).abs() < 1e-15 && (w[0] - 0.6698).abs() < 1e-4);
        assert!((w[1] - 0.3302).abs() < 1e-4);
        assert!((o[0] - w0).abs() < 1e-15 && (o[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, "a", 10, 3, 0).is_err());
        let p = AttentionParams::new(&mut store, "a", 4, 2, 0).unwrap();
        assert_eq!(p.head_dim, 2);
        assert_eq!(store.value(p.wo).shape(), &[4, 4]);
    }

    #[test]
    fn multi_head_output_length() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 4, 2, 9).unwrap();
        let mut t = Tape::new();
        let a = p.bind(&mut t, &store).unwrap();
        let q = t.leaf(Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap()).unwrap();
        let k = t
            .leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0, 1.0], [0.5, 0.5, 0.5, 0.5]]).unwrap())
            .unwrap();
        let out = multi_head(&mut t, q, k, k, &a).unwrap();
        assert_eq!(t.value(out).shape(), &[1, 4]);
    }

    #[test]
    fn joint_mode_hand_example() {
        let (store, p) = identity_params(2);
        // audio anchor 0 = [2,0], neighbor 1 = [0,2]; visual partner of 0 = [1,0].
        let audio = Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let visual = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let labels = vec![vec![1], vec![1]];
        let g = build_correlation_graph(&audio, &labels, 2, Modality::Audio).unwrap();
        assert_eq!(g.neighbors(0).indices, vec![0, 1]);
        let out = aa_proxy(0, Modality::Audio, &audio, &visual, &g, &p, &store, AaMode::Joint).unwrap();
        let e = (2.0 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((w0 - 0.8044).abs() < 1e-4);
        assert!((out[0] - 2.0 * w0).abs() < 1e-14 && (out[0] - 1.6088).abs() < 1e-4);
        assert!((out[1] - 2.0 * (1.0 - w0)).abs() < 1e-14 && (out[1] - 0.3912).abs() < 1e-4);
    }

    #[test]
    fn joint_collapses_to_literal_when_neighbors_equal_anchor() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", 2, 1, 4).unwrap();
        let audio = Tensor::from_rows(&[[1.0, 0.5], [1.0, 0.5], [1.0, 0.5]]).unwrap();
        let visual = Tensor::from_rows(&[[0.3, 0.9], [0.1, 0.2], [0.7, 0.7]]).unwrap();
        let labels = vec![vec![1], vec![1], vec![1]];
        let g = build_correlation_graph(&audio, &labels, 3, Modality::Audio).unwrap();
        let j = aa_proxy(0, Modality::Audio, &audio, &visual, &g, &p, &store, AaMode::Joint).unwrap();
        let l = aa_proxy(0, Modality::Audio, &audio, &visual, &g, &p, &store, AaMode::Literal).unwrap();
        for (a, b) in j.iter().zip(&l) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

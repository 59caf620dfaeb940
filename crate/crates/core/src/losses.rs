//! Metric losses over label-space representations and the label-regression
//! loss.
//!
//! A batch of `n` pairs yields `2n` representation nodes: node `i` is the
//! audio side of sample `i` and node `n + i` its visual side. Two `2n x c`
//! tables are compared: anchor representations (AA proxies when enabled)
//! and the representations used for positives and negatives, which are the
//! same proxies under [`AaScope::AllTerms`] and the raw projections under
//! [`AaScope::AnchorOnly`]. All losses are means over their terms.

use std::str::FromStr;

use crate::attention::{aa_proxies, AaMode, BoundAttention, ProjectionVars};
use crate::autodiff::{Tape, Var};
use crate::data::{labels_overlap, Modality};
use crate::error::{Error, Result};
use crate::graph::CorrelationGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Triplet,
    TripletDagger,
    HardTriplet,
    Contrastive,
    NPair,
    Angular,
    Hinge,
    Dsl,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Triplet,
        LossKind::TripletDagger,
        LossKind::HardTriplet,
        LossKind::Contrastive,
        LossKind::NPair,
        LossKind::Angular,
        LossKind::Hinge,
        LossKind::Dsl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::TripletDagger => "triplet_dagger",
            LossKind::HardTriplet => "hard_triplet",
            LossKind::Contrastive => "contrastive",
            LossKind::NPair => "n_pair",
            LossKind::Angular => "angular",
            LossKind::Hinge => "hinge",
            LossKind::Dsl => "dsl",
        }
    }

    /// The triplet mining strategy behind this loss, if it uses one.
    pub fn strategy(self) -> Option<TripletStrategy> {
        match self {
            LossKind::Triplet | LossKind::Angular => Some(TripletStrategy::Triplet),
            LossKind::TripletDagger => Some(TripletStrategy::TripletDagger),
            LossKind::HardTriplet => Some(TripletStrategy::HardTriplet),
            _ => None,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AaScope {
    /// Anchor, positive and negative are all replaced by their proxies.
    #[default]
    AllTerms,
    /// Only the anchor is replaced; positives and negatives stay raw.
    AnchorOnly,
}

impl AaScope {
    pub fn as_str(self) -> &'static str {
        match self {
            AaScope::AllTerms => "all_terms",
            AaScope::AnchorOnly => "anchor_only",
        }
    }
}

impl FromStr for AaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_terms" => Ok(AaScope::AllTerms),
            "anchor_only" => Ok(AaScope::AnchorOnly),
            other => Err(Error::Config(format!("unknown AA scope {other:?}"))),
        }
    }
}

/// Which pairs the contrastive attraction term applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastiveConvention {
    /// Similar pairs are pulled together, dissimilar pairs pushed past the margin.
    #[default]
    Standard,
    /// Indicator roles swapped: similar pairs get the margin term.
    Printed,
}

impl ContrastiveConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            ContrastiveConvention::Standard => "standard",
            ContrastiveConvention::Printed => "printed",
        }
    }
}

impl FromStr for ContrastiveConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ContrastiveConvention::Standard),
            "printed" => Ok(ContrastiveConvention::Printed),
            other => Err(Error::Config(format!("unknown contrastive convention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub triplet_margin: f64,
    pub contrastive_margin: f64,
    pub scope: AaScope,
    pub aa_mode: AaMode,
    /// When false the metric loss compares raw projections (no proxies).
    pub use_aa: bool,
    pub contrastive_convention: ContrastiveConvention,
    /// Angular loss bound in degrees.
    pub angular_degrees: f64,
    pub hinge_pos_margin: f64,
    pub hinge_neg_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Triplet,
            triplet_margin: 1.2,
            contrastive_margin: 1.0,
            scope: AaScope::AllTerms,
            aa_mode: AaMode::Joint,
            use_aa: true,
            contrastive_convention: ContrastiveConvention::Standard,
            angular_degrees: 45.0,
            hinge_pos_margin: 0.5,
            hinge_neg_margin: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("triplet_margin", self.triplet_margin),
            ("contrastive_margin", self.contrastive_margin),
            ("hinge_neg_margin", self.hinge_neg_margin),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.hinge_pos_margin >= 0.0 && self.hinge_pos_margin < self.hinge_neg_margin) {
            return Err(Error::Config("hinge margins need 0 <= pos < neg".into()));
        }
        if !(self.angular_degrees > 0.0 && self.angular_degrees < 90.0) {
            return Err(Error::Config("angular_degrees must lie in (0, 90)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletStrategy {
    /// Anchor in either modality, positive and negative from the other.
    Triplet,
    /// For every anchor/positive pair only the negative nearest the anchor.
    HardTriplet,
    /// Every modality assignment of anchor, positive and negative.
    TripletDagger,
}

/// One triplet of node ids (`index + n * modality`, audio = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: u32,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletSet {
    pub batch_size: usize,
    pub triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Decodes a node id into its sample index and modality.
    pub fn node(&self, id: u32) -> (usize, Modality) {
        node_of(id as usize, self.batch_size)
    }
}

pub fn node_id(index: usize, modality: Modality, n: usize) -> usize {
    match modality {
        Modality::Audio => index,
        Modality::Visual => n + index,
    }
}

fn node_of(id: usize, n: usize) -> (usize, Modality) {
    if id < n {
        (id, Modality::Audio)
    } else {
        (id - n, Modality::Visual)
    }
}

const MODALITIES: [Modality; 2] = [Modality::Audio, Modality::Visual];

/// Enumerates triplets of a batch in ascending (anchor, positive, negative)
/// node order.
///
/// `distances` is the `2n x 2n` matrix of squared distances from anchor
/// representations to positive/negative representations; it is required by
/// [`TripletStrategy::HardTriplet`] and ignored otherwise. Ties between
/// equally hard negatives go to the lowest node id.
pub fn mine_triplets(labels: &[Vec<u8>], strategy: TripletStrategy, distances: Option<&Tensor>) -> Result<TripletSet> {
    let n = labels.len();
    if strategy == TripletStrategy::HardTriplet {
        let d = distances.ok_or_else(|| Error::contract("hard triplet mining needs anchor distances"))?;
        if d.shape() != [2 * n, 2 * n] {
            return Err(Error::shape("mine_triplets", d.shape(), &[2 * n, 2 * n]));
        }
    }
    let mut triplets = Vec::new();
    for ma in MODALITIES {
        for a in 0..n {
            let anchor = node_id(a, ma, n);
            let pos_modalities: &[Modality] = match strategy {
                TripletStrategy::TripletDagger => &MODALITIES,
                _ => std::slice::from_ref(if ma == Modality::Audio {
                    &MODALITIES[1]
                } else {
                    &MODALITIES[0]
                }),
            };
            let neg_modalities = pos_modalities;
            for &mp in pos_modalities {
                for p in 0..n {
                    let positive = node_id(p, mp, n);
                    if positive == anchor || !labels_overlap(&labels[a], &labels[p]) {
                        continue;
                    }
                    let negatives = neg_modalities.iter().flat_map(|&mn| {
                        (0..n)
                            .filter(move |&j| !labels_overlap(&labels[a], &labels[j]))
                            .map(move |j| node_id(j, mn, n))
                    });
                    if strategy == TripletStrategy::HardTriplet {
                        let d = distances.unwrap();
                        let hardest = negatives.fold(None::<(usize, f64)>, |best, j| {
                            let dj = d.at(anchor, j);
                            match best {
                                Some((_, bd)) if bd <= dj => best,
                                _ => Some((j, dj)),
                            }
                        });
                        if let Some((j, _)) = hardest {
                            triplets.push(triplet(anchor, positive, j));
                        }
                    } else {
                        let mut negs: Vec<usize> = negatives.collect();
                        negs.sort_unstable();
                        triplets.extend(negs.into_iter().map(|j| triplet(anchor, positive, j)));
                    }
                }
            }
        }
    }
    if triplets.is_empty() {
        log::debug!("batch of {n} samples has no valid triplet");
    }
    triplets.sort_unstable();
    Ok(TripletSet {
        batch_size: n,
        triplets,
    })
}

fn triplet(a: usize, p: usize, n: usize) -> Triplet {
    Triplet {
        anchor: a as u32,
        positive: p as u32,
        negative: n as u32,
    }
}

/// Anchor and comparison tables for one batch, both `2n x c`.
#[derive(Debug, Clone, Copy)]
pub struct BatchReps {
    pub anchors: Var,
    pub others: Var,
    pub n: usize,
}

impl BatchReps {
    /// Stacks audio rows over visual rows for both tables.
    pub fn new(tape: &mut Tape, anchors: ProjectionVars, others: ProjectionVars) -> Result<Self> {
        let n = tape.value(anchors.audio).rows();
        let a = tape.concat_rows(&[anchors.audio, anchors.visual])?;
        let o = if anchors.audio == others.audio && anchors.visual == others.visual {
            a
        } else {
            tape.concat_rows(&[others.audio, others.visual])?
        };
        Ok(Self {
            anchors: a,
            others: o,
            n,
        })
    }
}

/// A metric loss value and the number of terms averaged into it.
#[derive(Debug, Clone, Copy)]
pub struct MetricLoss {
    pub value: Var,
    pub terms: usize,
}

fn zero(tape: &mut Tape) -> Result<MetricLoss> {
    Ok(MetricLoss {
        value: tape.leaf(Tensor::scalar(0.0))?,
        terms: 0,
    })
}

/// `mean over triplets of [ |A(a) - O(p)|^2 - |A(a) - O(n)|^2 + margin ]_+`
pub fn aa_triplet_loss(tape: &mut Tape, reps: BatchReps, triplets: &TripletSet, margin: f64) -> Result<MetricLoss> {
    if triplets.is_empty() {
        return zero(tape);
    }
    let d = tape.pairwise_sq_dist(reps.anchors, reps.others)?;
    triplet_hinge(tape, d, triplets, margin)
}

fn triplet_hinge(tape: &mut Tape, d: Var, triplets: &TripletSet, margin: f64) -> Result<MetricLoss> {
    let ap: Vec<(usize, usize)> = triplets
        .triplets
        .iter()
        .map(|t| (t.anchor as usize, t.positive as usize))
        .collect();
    let an: Vec<(usize, usize)> = triplets
        .triplets
        .iter()
        .map(|t| (t.anchor as usize, t.negative as usize))
        .collect();
    let dap = tape.gather_elems(d, &ap)?;
    let dan = tape.gather_elems(d, &an)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinged = tape.hinge(shifted)?;
    Ok(MetricLoss {
        value: tape.mean_all(hinged)?,
        terms: triplets.len(),
    })
}

/// Cross-modal pairs `(anchor node, other node)` with their similarity flag.
fn cross_modal_pairs(labels: &[Vec<u8>]) -> (Vec<(usize, usize)>, Vec<bool>) {
    let n = labels.len();
    let mut pairs = Vec::with_capacity(2 * n * n);
    let mut similar = Vec::with_capacity(2 * n * n);
    for ma in MODALITIES {
        for i in 0..n {
            for j in 0..n {
                pairs.push((node_id(i, ma, n), node_id(j, ma.other(), n)));
                similar.push(labels_overlap(&labels[i], &labels[j]));
            }
        }
    }
    (pairs, similar)
}

/// Euclidean distances of the given node pairs.
fn pair_distances(tape: &mut Tape, reps: BatchReps, pairs: &[(usize, usize)]) -> Result<Var> {
    let d2 = tape.pairwise_sq_dist(reps.anchors, reps.others)?;
    let picked = tape.gather_elems(d2, pairs)?;
    tape.sqrt(picked)
}

/// Mean over all cross-modal pairs of `1/2 D^2` for similar pairs and
/// `1/2 max(0, m - D)^2` for dissimilar ones (roles swapped under
/// [`ContrastiveConvention::Printed`]).
pub fn aa_contrastive_loss(
    tape: &mut Tape,
    reps: BatchReps,
    labels: &[Vec<u8>],
    margin: f64,
    convention: ContrastiveConvention,
) -> Result<MetricLoss> {
    let (pairs, similar) = cross_modal_pairs(labels);
    if pairs.is_empty() {
        return zero(tape);
    }
    contrastive_from_pairs(tape, reps, &pairs, &similar, margin, convention)
}

fn contrastive_from_pairs(
    tape: &mut Tape,
    reps: BatchReps,
    pairs: &[(usize, usize)],
    similar: &[bool],
    margin: f64,
    convention: ContrastiveConvention,
) -> Result<MetricLoss> {
    let d = pair_distances(tape, reps, pairs)?;
    let pull: Vec<f64> = similar
        .iter()
        .map(|&s| f64::from(u8::from(s == (convention == ContrastiveConvention::Standard))))
        .collect();
    let push: Vec<f64> = pull.iter().map(|p| 1.0 - p).collect();
    let pull = tape.leaf(Tensor::vector(pull))?;
    let push = tape.leaf(Tensor::vector(push))?;
    let d2 = tape.square(d)?;
    let attract = tape.mul(d2, pull)?;
    let neg_d = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(neg_d, margin)?;
    let gap = tape.hinge(gap)?;
    let gap2 = tape.square(gap)?;
    let repel = tape.mul(gap2, push)?;
    let both = tape.add(attract, repel)?;
    let mean = tape.mean_all(both)?;
    Ok(MetricLoss {
        value: tape.scale(mean, 0.5)?,
        terms: pairs.len(),
    })
}

/// Double-margin hinge on Euclidean distance over all cross-modal pairs:
/// `[D - m_pos]_+` for similar pairs and `[m_neg - D]_+` for dissimilar ones.
pub fn hinge_loss(
    tape: &mut Tape,
    reps: BatchReps,
    labels: &[Vec<u8>],
    pos_margin: f64,
    neg_margin: f64,
) -> Result<MetricLoss> {
    let (pairs, similar) = cross_modal_pairs(labels);
    if pairs.is_empty() {
        return zero(tape);
    }
    let d = pair_distances(tape, reps, &pairs)?;
    let sim: Vec<f64> = similar.iter().map(|&s| f64::from(u8::from(s))).collect();
    let dis: Vec<f64> = sim.iter().map(|s| 1.0 - s).collect();
    let sim = tape.leaf(Tensor::vector(sim))?;
    let dis = tape.leaf(Tensor::vector(dis))?;
    let over = tape.add_scalar(d, -pos_margin)?;
    let over = tape.hinge(over)?;
    let over = tape.mul(over, sim)?;
    let neg_d = tape.scale(d, -1.0)?;
    let under = tape.add_scalar(neg_d, neg_margin)?;
    let under = tape.hinge(under)?;
    let under = tape.mul(under, dis)?;
    let both = tape.add(over, under)?;
    Ok(MetricLoss {
        value: tape.mean_all(both)?,
        terms: pairs.len(),
    })
}

/// Multi-class N-pair loss. Each anchor node's positive is its paired
/// partner in the other modality and its negatives are the other-modality
/// nodes with disjoint labels:
/// `mean over anchors of log(1 + sum_j exp(s(a, n_j) - s(a, p)))`
/// with `s` the inner product. Anchors without negatives contribute 0.
pub fn n_pair_loss(tape: &mut Tape, reps: BatchReps, labels: &[Vec<u8>]) -> Result<MetricLoss> {
    let n = labels.len();
    if n == 0 {
        return zero(tape);
    }
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    let mut offsets = vec![0];
    for ma in MODALITIES {
        for i in 0..n {
            let a = node_id(i, ma, n);
            let p = node_id(i, ma.other(), n);
            for j in 0..n {
                if !labels_overlap(&labels[i], &labels[j]) {
                    neg.push((a, node_id(j, ma.other(), n)));
                    pos.push((a, p));
                }
            }
            offsets.push(neg.len());
        }
    }
    let ot = tape.transpose(reps.others)?;
    let s = tape.matmul(reps.anchors, ot)?;
    let per_anchor = if neg.is_empty() {
        tape.leaf(Tensor::zeros(&[2 * n]))?
    } else {
        let sn = tape.gather_elems(s, &neg)?;
        let sp = tape.gather_elems(s, &pos)?;
        let diff = tape.sub(sn, sp)?;
        tape.segment_log1p_sum_exp(diff, &offsets)?
    };
    Ok(MetricLoss {
        value: tape.mean_all(per_anchor)?,
        terms: 2 * n,
    })
}

/// Angular loss over the cross-modal triplet set:
/// `mean [ |a - p|^2 - 4 tan^2(alpha) |n - (a + p)/2|^2 ]_+`.
///
/// The centre distance is expanded as
/// `|n - c|^2 = (|n - a|^2 + |n - p|^2) / 2 - |a - p|^2 / 4`.
pub fn angular_loss(tape: &mut Tape, reps: BatchReps, triplets: &TripletSet, degrees: f64) -> Result<MetricLoss> {
    if triplets.is_empty() {
        return zero(tape);
    }
    let t2 = degrees.to_radians().tan().powi(2);
    let d_ao = tape.pairwise_sq_dist(reps.anchors, reps.others)?;
    let d_oo = tape.pairwise_sq_dist(reps.others, reps.others)?;
    let ts = &triplets.triplets;
    let ap: Vec<_> = ts.iter().map(|t| (t.anchor as usize, t.positive as usize)).collect();
    let an: Vec<_> = ts.iter().map(|t| (t.anchor as usize, t.negative as usize)).collect();
    let pn: Vec<_> = ts.iter().map(|t| (t.positive as usize, t.negative as usize)).collect();
    let dap = tape.gather_elems(d_ao, &ap)?;
    let dan = tape.gather_elems(d_ao, &an)?;
    let dpn = tape.gather_elems(d_oo, &pn)?;
    let half_sum = tape.add(dan, dpn)?;
    let half_sum = tape.scale(half_sum, 0.5)?;
    let quarter = tape.scale(dap, 0.25)?;
    let centre = tape.sub(half_sum, quarter)?;
    let centre = tape.scale(centre, 4.0 * t2)?;
    let arg = tape.sub(dap, centre)?;
    let hinged = tape.hinge(arg)?;
    Ok(MetricLoss {
        value: tape.mean_all(hinged)?,
        terms: ts.len(),
    })
}

/// Dual softmax loss over the inner-product matrix between anchor nodes of
/// one modality and comparison nodes of the other. The logits are
/// reweighted by a softmax prior taken along the anchor axis, then scored
/// with cross-entropy against the paired partner:
/// `S' = S * softmax_col(S)`, `loss = -mean_i log softmax_row(S')[i, i]`,
/// averaged over both anchor modalities.
pub fn dual_softmax_loss(tape: &mut Tape, reps: BatchReps) -> Result<MetricLoss> {
    let n = reps.n;
    if n == 0 {
        return zero(tape);
    }
    let first: Vec<usize> = (0..n).collect();
    let second: Vec<usize> = (n..2 * n).collect();
    let mut parts = Vec::with_capacity(2);
    for (rows, cols) in [(&first, &second), (&second, &first)] {
        let a = tape.gather_rows(reps.anchors, rows)?;
        let o = tape.gather_rows(reps.others, cols)?;
        let ot = tape.transpose(o)?;
        let s = tape.matmul(a, ot)?;
        let st = tape.transpose(s)?;
        let prior = tape.softmax_rows(st)?;
        let prior = tape.transpose(prior)?;
        let weighted = tape.mul(s, prior)?;
        let logp = tape.log_softmax_rows(weighted)?;
        let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let picked = tape.gather_elems(logp, &diag)?;
        parts.push(tape.mean_all(picked)?);
    }
    let sum = tape.add(parts[0], parts[1])?;
    Ok(MetricLoss {
        value: tape.scale(sum, -0.5)?,
        terms: 2 * n,
    })
}

/// Dispatches to the configured metric loss.
pub fn metric_loss(tape: &mut Tape, cfg: &LossConfig, reps: BatchReps, labels: &[Vec<u8>]) -> Result<MetricLoss> {
    if labels.len() != reps.n {
        return Err(Error::contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            reps.n
        )));
    }
    match cfg.kind {
        LossKind::Triplet | LossKind::TripletDagger => {
            let set = mine_triplets(labels, cfg.kind.strategy().unwrap(), None)?;
            aa_triplet_loss(tape, reps, &set, cfg.triplet_margin)
        }
        LossKind::HardTriplet => {
            let d = tape.pairwise_sq_dist(reps.anchors, reps.others)?;
            let set = mine_triplets(labels, TripletStrategy::HardTriplet, Some(tape.value(d)))?;
            if set.is_empty() {
                return zero(tape);
            }
            triplet_hinge(tape, d, &set, cfg.triplet_margin)
        }
        LossKind::Contrastive => {
            aa_contrastive_loss(tape, reps, labels, cfg.contrastive_margin, cfg.contrastive_convention)
        }
        LossKind::NPair => n_pair_loss(tape, reps, labels),
        LossKind::Angular => {
            let set = mine_triplets(labels, TripletStrategy::Triplet, None)?;
            angular_loss(tape, reps, &set, cfg.angular_degrees)
        }
        LossKind::Hinge => hinge_loss(tape, reps, labels, cfg.hinge_pos_margin, cfg.hinge_neg_margin),
        LossKind::Dsl => dual_softmax_loss(tape, reps),
    }
}

/// `|F_a - Y|_F / n + |F_v - Y|_F / n` for `n x c` projections and targets.
pub fn label_loss(tape: &mut Tape, fa: Var, fv: Var, targets: Var) -> Result<Var> {
    let n = tape.value(targets).rows();
    if n == 0 {
        return Err(Error::contract("label loss over an empty batch"));
    }
    let mut total = None;
    for f in [fa, fv] {
        let diff = tape.sub(f, targets)?;
        let norm = tape.frobenius_norm(diff)?;
        let term = tape.scale(norm, 1.0 / n as f64)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}

/// What the proxies of one batch are computed from.
#[derive(Debug, Clone, Copy)]
pub struct AaContext<'a> {
    pub attn: &'a BoundAttention,
    pub audio_graph: &'a CorrelationGraph,
    pub visual_graph: &'a CorrelationGraph,
    /// Projection rows the graphs index. The first `n` rows must be the
    /// batch itself; extra rows (constant neighbors from outside the batch)
    /// may follow. `None` means the graphs index the batch rows directly.
    pub graph_rows: Option<ProjectionVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub label: Var,
    pub metric: Var,
    pub metric_terms: usize,
}

/// Label loss plus the configured metric loss for one batch.
///
/// `projections` are the `n x c` batch projections, `targets` the `n x c`
/// label matrix. Proxies are used when `cfg.use_aa` holds, which requires
/// an [`AaContext`].
pub fn total_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    projections: ProjectionVars,
    targets: Var,
    labels: &[Vec<u8>],
    aa: Option<AaContext<'_>>,
) -> Result<LossBreakdown> {
    let n = labels.len();
    for m in MODALITIES {
        let shape = tape.value(projections.get(m)).shape();
        if shape != tape.value(targets).shape() || shape[0] != n {
            return Err(Error::shape("total_loss", shape, tape.value(targets).shape()));
        }
    }
    let label = label_loss(tape, projections.audio, projections.visual, targets)?;
    let anchors = if cfg.use_aa {
        let ctx = aa.ok_or_else(|| Error::contract("AA is enabled but no attention context was given"))?;
        let rows = ctx.graph_rows.unwrap_or(projections);
        let batch: Vec<usize> = (0..n).collect();
        let audio = aa_proxies(
            tape,
            ctx.attn,
            rows,
            Modality::Audio,
            ctx.audio_graph,
            &batch,
            cfg.aa_mode,
        )?;
        let visual = aa_proxies(
            tape,
            ctx.attn,
            rows,
            Modality::Visual,
            ctx.visual_graph,
            &batch,
            cfg.aa_mode,
        )?;
        ProjectionVars {
            audio: audio.proxies,
            visual: visual.proxies,
        }
    } else {
        projections
    };
    let others = if cfg.use_aa && cfg.scope == AaScope::AnchorOnly {
        projections
    } else {
        anchors
    };
    let reps = BatchReps::new(tape, anchors, others)?;
    let metric = metric_loss(tape, cfg, reps, labels)?;
    let total = tape.add(label, metric.value)?;
    Ok(LossBreakdown {
        total,
        label,
        metric: metric.value,
        metric_terms: metric.terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reps_from(tape: &mut Tape, audio: &[[f64; 2]], visual: &[[f64; 2]]) -> BatchReps {
        let a = tape.leaf(Tensor::from_rows(audio).unwrap()).unwrap();
        let v = tape.leaf(Tensor::from_rows(visual).unwrap()).unwrap();
        let p = ProjectionVars { audio: a, visual: v };
        BatchReps::new(tape, p, p).unwrap()
    }

    fn one_hot(classes: &[usize]) -> Vec<Vec<u8>> {
        let c = classes.iter().max().unwrap() + 1;
        classes
            .iter()
            .map(|&k| (0..c).map(|j| u8::from(j == k)).collect())
            .collect()
    }

    #[test]
    fn same_category_pair_has_no_triplets() {
        let labels = one_hot(&[0, 0]);
        for s in [TripletStrategy::Triplet, TripletStrategy::TripletDagger] {
            assert!(mine_triplets(&labels, s, None).unwrap().is_empty());
        }
    }

    #[test]
    fn triplet_hand_example_is_zero() {
        // AA(a) = [0,0], AA(p) = [1,0], AA(n) = [0,2]: 1 - 4 + 1.2 < 0.
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.0, 0.0], [9.0, 9.0]], &[[1.0, 0.0], [0.0, 2.0]]);
        let set = TripletSet {
            batch_size: 2,
            triplets: vec![triplet(0, 2, 3)],
        };
        let l = aa_triplet_loss(&mut t, reps, &set, 1.2).unwrap();
        assert_eq!(t.value(l.value).item().unwrap(), 0.0);
    }

    #[test]
    fn equal_distances_leave_the_margin() {
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.0, 0.0], [9.0, 9.0]], &[[1.0, 0.0], [0.0, 1.0]]);
        let set = TripletSet {
            batch_size: 2,
            triplets: vec![triplet(0, 2, 3)],
        };
        let l = aa_triplet_loss(&mut t, reps, &set, 1.2).unwrap();
        assert!((t.value(l.value).item().unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn contrastive_dissimilar_hand_example() {
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.0, 0.0]], &[[0.5, 0.0]]);
        let l =
            contrastive_from_pairs(&mut t, reps, &[(0, 1)], &[false], 1.0, ContrastiveConvention::Standard).unwrap();
        assert!((t.value(l.value).item().unwrap() - 0.125).abs() < 1e-15);
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.0, 0.0]], &[[0.5, 0.0]]);
        let l = contrastive_from_pairs(&mut t, reps, &[(0, 1)], &[true], 1.0, ContrastiveConvention::Printed).unwrap();
        assert!((t.value(l.value).item().unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn contrastive_identical_similar_pair_is_zero() {
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.3, 0.4]], &[[0.3, 0.4]]);
        let l = aa_contrastive_loss(&mut t, reps, &one_hot(&[0]), 1.0, ContrastiveConvention::Standard).unwrap();
        assert_eq!(t.value(l.value).item().unwrap(), 0.0);
    }

    #[test]
    fn hinge_with_satisfied_margins_is_zero() {
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[0.0, 0.0], [5.0, 0.0]], &[[0.1, 0.0], [5.0, 0.2]]);
        let l = hinge_loss(&mut t, reps, &one_hot(&[0, 1]), 0.5, 1.0).unwrap();
        assert_eq!(t.value(l.value).item().unwrap(), 0.0);
    }

    #[test]
    fn n_pair_without_negatives_is_zero() {
        let mut t = Tape::new();
        let reps = reps_from(&mut t, &[[1.0, 2.0]], &[[0.5, -1.0]]);
        let l = n_pair_loss(&mut t, reps, &one_hot(&[0])).unwrap();
        assert_eq!(t.value(l.value).item().unwrap(), 0.0);
    }

    #[test]
    fn label_loss_single_row_offset() {
        let mut t = Tape::new();
        let y = t.leaf(Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap()).unwrap();
        let fa = t.leaf(Tensor::from_rows(&[[1.0, 1.0, 0.0]]).unwrap()).unwrap();
        let l = label_loss(&mut t, fa, y, y).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 1.0);
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("dagger".parse::<LossKind>().is_err());
    }
}

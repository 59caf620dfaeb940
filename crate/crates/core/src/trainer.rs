//! Deterministic training loop, evaluation hooks and the k sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::attention::{aa_proxies, AttentionParams, ProjectionVars};
use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::{fingerprint, Checkpoint};
use crate::data::{make_batches, Dataset, Modality};
use crate::error::{Error, Result};
use crate::graph::{build_graph, CorrelationGraph, NeighborList, NeighborPool};
use crate::losses::{total_loss, AaContext, LossConfig, LossKind};
use crate::metrics::{evaluate_embeddings, Evaluation, DEFAULT_K_GRID};
use crate::network::{ProjectionNet, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Shape-determining model settings; checkpoints are tied to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Architecture {
    pub fn for_dataset(dataset: &Dataset, hidden: usize, heads: usize) -> Self {
        Self {
            audio_dim: dataset.audio_dim(),
            visual_dim: dataset.visual_dim(),
            classes: dataset.classes(),
            hidden,
            heads,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "audio_dim={};visual_dim={};classes={};hidden={};heads={}",
            self.audio_dim, self.visual_dim, self.classes, self.hidden, self.heads
        )
    }

    pub fn fingerprint(&self) -> [u32; 2] {
        fingerprint(&self.describe())
    }
}

/// Both projection networks and the attention block sharing one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
    pub audio: ProjectionNet,
    pub visual: ProjectionNet,
    pub attention: AttentionParams,
}

impl Model {
    pub fn new(arch: Architecture, dropout: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let audio = ProjectionNet::new(
            &mut store,
            Modality::Audio,
            arch.audio_dim,
            arch.hidden,
            arch.classes,
            dropout,
            seed,
        )?;
        let visual = ProjectionNet::new(
            &mut store,
            Modality::Visual,
            arch.visual_dim,
            arch.hidden,
            arch.classes,
            dropout,
            seed,
        )?;
        let attention = AttentionParams::new(&mut store, "attention", arch.classes, arch.heads, seed)?;
        Ok(Self {
            arch,
            store,
            audio,
            visual,
            attention,
        })
    }

    pub fn net(&self, m: Modality) -> &ProjectionNet {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    /// Eval-mode label-space projections of a whole dataset.
    pub fn project(&self, dataset: &Dataset) -> Result<(Tensor, Tensor)> {
        let idx = dataset.all_indices();
        let a = self
            .audio
            .project(&self.store, &dataset.features(Modality::Audio, &idx))?;
        let v = self
            .visual
            .project(&self.store, &dataset.features(Modality::Visual, &idx))?;
        Ok((a, v))
    }

    /// Retrieval over raw projections, or over proxies when `proxies` is set
    /// (graphs are then built on the evaluated split itself).
    pub fn evaluate(&self, dataset: &Dataset, grid: &[usize], proxies: Option<ProxyEval>) -> Result<Evaluation> {
        if dataset.is_empty() {
            return Err(Error::Evaluation("empty test split".into()));
        }
        let (a, v) = self.project(dataset)?;
        let labels = dataset.labels();
        match proxies {
            None => evaluate_embeddings(&a, &v, &labels, grid),
            Some(p) => {
                let (pa, pv) = self.proxies(&a, &v, &labels, p)?;
                evaluate_embeddings(&pa, &pv, &labels, grid)
            }
        }
    }

    fn proxies(&self, a: &Tensor, v: &Tensor, labels: &[Vec<u8>], p: ProxyEval) -> Result<(Tensor, Tensor)> {
        let ga = graph_for(Modality::Audio, a, v, labels, p.k, p.pool)?;
        let gv = graph_for(Modality::Visual, a, v, labels, p.k, p.pool)?;
        let mut tape = Tape::new();
        let attn = self.attention.bind(&mut tape, &self.store)?;
        let rows = ProjectionVars {
            audio: tape.leaf(a.clone())?,
            visual: tape.leaf(v.clone())?,
        };
        let all: Vec<usize> = (0..labels.len()).collect();
        let pa = aa_proxies(&mut tape, &attn, rows, Modality::Audio, &ga, &all, p.mode)?;
        let pv = aa_proxies(&mut tape, &attn, rows, Modality::Visual, &gv, &all, p.mode)?;
        Ok((tape.value(pa.proxies).clone(), tape.value(pv.proxies).clone()))
    }
}

/// Settings for proxy-based evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyEval {
    pub k: usize,
    pub pool: NeighborPool,
    pub mode: crate::attention::AaMode,
}

fn graph_for(
    m: Modality,
    audio: &Tensor,
    visual: &Tensor,
    labels: &[Vec<u8>],
    k: usize,
    pool: NeighborPool,
) -> Result<CorrelationGraph> {
    let (own, other) = match m {
        Modality::Audio => (audio, visual),
        Modality::Visual => (visual, audio),
    };
    let candidates = match pool {
        NeighborPool::IntraModal => own,
        NeighborPool::CrossModal => other,
    };
    build_graph(own, candidates, labels, k, m, pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphScope {
    /// Rebuilt for every batch from the batch's current projections.
    #[default]
    PerBatch,
    /// Rebuilt once per epoch over the whole training split; neighbors
    /// outside the current batch enter as constants.
    PerEpochFull,
}

impl GraphScope {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphScope::PerBatch => "per_batch",
            GraphScope::PerEpochFull => "per_epoch_full",
        }
    }
}

impl FromStr for GraphScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_batch" => Ok(GraphScope::PerBatch),
            "per_epoch_full" => Ok(GraphScope::PerEpochFull),
            other => Err(Error::Config(format!("unknown graph scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub k: usize,
    pub loss: LossConfig,
    pub graph_scope: GraphScope,
    pub neighbor_pool: NeighborPool,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Evaluate on the test split every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval_proxies: bool,
    pub k_grid: Vec<usize>,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 200,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            k: 3,
            loss: LossConfig::default(),
            graph_scope: GraphScope::PerBatch,
            neighbor_pool: NeighborPool::IntraModal,
            hidden: DEFAULT_HIDDEN,
            heads: 1,
            dropout: DEFAULT_DROPOUT,
            eval_every: 10,
            eval_proxies: false,
            k_grid: DEFAULT_K_GRID.to_vec(),
            checkpoint_every: 0,
            checkpoint_path: None,
            trace_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.hidden < 1 || self.heads < 1 {
            return Err(Error::Config("hidden and heads must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::Config("k_grid needs positive cut-offs".into()));
        }
        self.loss.validate()
    }

    fn proxy_eval(&self) -> Option<ProxyEval> {
        self.eval_proxies.then_some(ProxyEval {
            k: self.k,
            pool: self.neighbor_pool,
            mode: self.loss.aa_mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub label: f64,
    pub metric: f64,
    pub map_av: Option<f64>,
    pub map_va: Option<f64>,
}

pub const TRACE_HEADER: &str = "epoch,mean_total_loss,mean_label_loss,mean_metric_loss,test_map_av,test_map_va";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.total,
            r.label,
            r.metric,
            opt(r.map_av),
            opt(r.map_va)
        );
    }
    s
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: Vec<TraceRow>,
    warned_inert: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::for_dataset(train, config.hidden, config.heads);
        let model = Model::new(arch, config.dropout, config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, &model.store)?;
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            trace: Vec::new(),
            warned_inert: false,
        })
    }

    /// Continues from a checkpoint written by a run with the same architecture.
    pub fn resume(config: TrainConfig, train: &Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, train)?;
        checkpoint.check_fingerprint(t.model.arch.fingerprint())?;
        t.epoch = checkpoint.restore(&mut t.model.store, &mut t.optimizer)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model.store,
            &self.optimizer,
            self.epoch,
            self.model.arch.fingerprint(),
        )
    }

    /// Trains until `config.epochs` epochs are complete, writing the trace
    /// and checkpoints if paths are configured. A non-finite loss or
    /// gradient aborts training; the last written checkpoint is left as is.
    pub fn fit(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let row = match self.run_epoch(train, test) {
                Ok(r) => r,
                Err(e) => {
                    self.write_trace()?;
                    return Err(e);
                }
            };
            self.trace.push(row);
            let every = self.config.checkpoint_every;
            if every > 0 && self.epoch.is_multiple_of(every) && self.epoch < self.config.epochs {
                self.write_checkpoint()?;
            }
        }
        self.write_trace()?;
        self.write_checkpoint()
    }

    fn write_trace(&self) -> Result<()> {
        if let Some(p) = &self.config.trace_path {
            std::fs::write(p, trace_csv(&self.trace))?;
        }
        Ok(())
    }

    fn write_checkpoint(&self) -> Result<()> {
        if let Some(p) = &self.config.checkpoint_path {
            self.checkpoint().save(p)?;
        }
        Ok(())
    }

    /// One pass over the training split. Returns the epoch's trace row.
    pub fn run_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<TraceRow> {
        let epoch = self.epoch + 1;
        let cfg = self.config.clone();
        let batches = make_batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let snapshot = match (cfg.graph_scope, cfg.loss.use_aa) {
            (GraphScope::PerEpochFull, true) => Some(EpochGraphs::build(&self.model, train, &cfg)?),
            _ => None,
        };
        let (mut total, mut label, mut metric) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let step_seed = seed::derive(cfg.seed, &[seed::STREAM_DROPOUT, epoch as u64, b as u64]);
            let (t, l, m, terms) = self
                .step(train, batch, snapshot.as_ref(), step_seed)
                .map_err(|e| abort(epoch, e))?;
            if terms == 0 && !self.warned_inert {
                log::warn!("batch without valid metric-loss terms: training falls back to the label loss there");
                self.warned_inert = true;
            }
            total += t;
            label += l;
            metric += m;
        }
        let nb = batches.len() as f64;
        let mut row = TraceRow {
            epoch,
            total: total / nb,
            label: label / nb,
            metric: metric / nb,
            map_av: None,
            map_va: None,
        };
        self.epoch = epoch;
        if let Some(test) = test {
            if cfg.eval_every > 0 && (epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.epochs) {
                let e = self.model.evaluate(test, &cfg.k_grid, cfg.proxy_eval())?;
                row.map_av = Some(e.audio_to_visual.map);
                row.map_va = Some(e.visual_to_audio.map);
            }
        }
        log::info!(
            "epoch {epoch}: total {:.6} label {:.6} metric {:.6}",
            row.total,
            row.label,
            row.metric
        );
        Ok(row)
    }

    fn step(
        &mut self,
        train: &Dataset,
        batch: &[usize],
        snapshot: Option<&EpochGraphs>,
        step_seed: u64,
    ) -> Result<(f64, f64, f64, usize)> {
        let cfg = &self.config;
        let model = &self.model;
        let labels: Vec<Vec<u8>> = batch.iter().map(|&i| train.label(i).to_vec()).collect();
        let mut tape = Tape::new();
        let xa = tape.leaf(train.features(Modality::Audio, batch))?;
        let xv = tape.leaf(train.features(Modality::Visual, batch))?;
        let fa = model
            .audio
            .forward(&mut tape, &model.store, xa, true, seed::derive(step_seed, &[0]))?;
        let fv = model
            .visual
            .forward(&mut tape, &model.store, xv, true, seed::derive(step_seed, &[1]))?;
        let targets = tape.leaf(train.label_matrix(batch))?;
        let projections = ProjectionVars { audio: fa, visual: fv };

        let breakdown = if cfg.loss.use_aa {
            let attn = model.attention.bind(&mut tape, &model.store)?;
            let (ga, gv, rows) = match snapshot {
                None => {
                    let a = tape.value(fa).clone();
                    let v = tape.value(fv).clone();
                    let ga = graph_for(Modality::Audio, &a, &v, &labels, cfg.k, cfg.neighbor_pool)?;
                    let gv = graph_for(Modality::Visual, &a, &v, &labels, cfg.k, cfg.neighbor_pool)?;
                    (ga, gv, None)
                }
                Some(s) => {
                    let local = s.localize(train, batch)?;
                    let ea = tape.leaf(local.extra_audio)?;
                    let ev = tape.leaf(local.extra_visual)?;
                    let rows = ProjectionVars {
                        audio: tape.concat_rows(&[fa, ea])?,
                        visual: tape.concat_rows(&[fv, ev])?,
                    };
                    (local.audio, local.visual, Some(rows))
                }
            };
            let ctx = AaContext {
                attn: &attn,
                audio_graph: &ga,
                visual_graph: &gv,
                graph_rows: rows,
            };
            total_loss(&mut tape, &cfg.loss, projections, targets, &labels, Some(ctx))?
        } else {
            total_loss(&mut tape, &cfg.loss, projections, targets, &labels, None)?
        };

        let total = tape.value(breakdown.total).item()?;
        let label = tape.value(breakdown.label).item()?;
        let metric = tape.value(breakdown.metric).item()?;
        if !total.is_finite() {
            return Err(Error::contract(format!("non-finite loss {total}")));
        }
        self.model.store.zero_grad();
        tape.backward(breakdown.total, &mut self.model.store)?;
        self.optimizer.step(&mut self.model.store)?;
        Ok((total, label, metric, breakdown.metric_terms))
    }
}

fn abort(epoch: usize, e: Error) -> Error {
    match e {
        Error::TrainingAborted { .. } => e,
        other => Error::TrainingAborted {
            epoch,
            reason: other.to_string(),
        },
    }
}

/// Whole-split graphs built from eval-mode projections at the start of an epoch.
struct EpochGraphs {
    audio: Tensor,
    visual: Tensor,
    audio_graph: CorrelationGraph,
    visual_graph: CorrelationGraph,
    pool: NeighborPool,
    k: usize,
}

struct LocalGraphs {
    audio: CorrelationGraph,
    visual: CorrelationGraph,
    extra_audio: Tensor,
    extra_visual: Tensor,
}

impl EpochGraphs {
    fn build(model: &Model, train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let (audio, visual) = model.project(train)?;
        let labels = train.labels();
        let audio_graph = graph_for(Modality::Audio, &audio, &visual, &labels, cfg.k, cfg.neighbor_pool)?;
        let visual_graph = graph_for(Modality::Visual, &audio, &visual, &labels, cfg.k, cfg.neighbor_pool)?;
        Ok(Self {
            audio,
            visual,
            audio_graph,
            visual_graph,
            pool: cfg.neighbor_pool,
            k: cfg.k,
        })
    }

    /// Re-indexes the neighbor lists of the batch into local rows: batch
    /// rows first, then the out-of-batch neighbors in ascending order.
    fn localize(&self, train: &Dataset, batch: &[usize]) -> Result<LocalGraphs> {
        let mut local: BTreeMap<usize, usize> = batch.iter().enumerate().map(|(p, &g)| (g, p)).collect();
        let mut extras: Vec<usize> = batch
            .iter()
            .flat_map(|&g| {
                self.audio_graph.neighbors(g).indices[1..]
                    .iter()
                    .chain(&self.visual_graph.neighbors(g).indices[1..])
                    .copied()
            })
            .filter(|g| !local.contains_key(g))
            .collect();
        extras.sort_unstable();
        extras.dedup();
        for (p, &g) in extras.iter().enumerate() {
            local.insert(g, batch.len() + p);
        }
        let all: Vec<usize> = batch.iter().chain(&extras).copied().collect();
        let labels: Vec<Vec<u8>> = all.iter().map(|&g| train.label(g).to_vec()).collect();
        let relabel = |graph: &CorrelationGraph| -> Result<CorrelationGraph> {
            let lists = all
                .iter()
                .enumerate()
                .map(|(p, &g)| {
                    if p < batch.len() {
                        let src = graph.neighbors(g);
                        NeighborList {
                            anchor: p,
                            indices: src.indices.iter().map(|j| local[j]).collect(),
                            scores: src.scores.clone(),
                            truncated: src.truncated,
                        }
                    } else {
                        NeighborList {
                            anchor: p,
                            indices: vec![p],
                            scores: vec![1.0],
                            truncated: self.k > 1,
                        }
                    }
                })
                .collect();
            CorrelationGraph::from_lists(graph.modality, self.pool, self.k, &labels, lists)
        };
        let gather = |t: &Tensor| -> Result<Tensor> {
            let cols = t.cols();
            let data = extras.iter().flat_map(|&g| t.row(g).iter().copied()).collect();
            Tensor::new(vec![extras.len(), cols], data)
        };
        Ok(LocalGraphs {
            audio: relabel(&self.audio_graph)?,
            visual: relabel(&self.visual_graph)?,
            extra_audio: gather(&self.audio)?,
            extra_visual: gather(&self.visual)?,
        })
    }
}

/// Trains on `train` and evaluates on `test`, returning the trainer.
pub fn train(train: &Dataset, test: Option<&Dataset>, config: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(config, train)?;
    t.fit(train, test)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: LossKind,
    pub k: usize,
    pub map_av: f64,
    pub map_va: f64,
}

impl SweepRow {
    pub fn map_avg(&self) -> f64 {
        (self.map_av + self.map_va) / 2.0
    }
}

pub const SWEEP_STRATEGIES: [LossKind; 3] = [LossKind::Triplet, LossKind::HardTriplet, LossKind::TripletDagger];

pub const SWEEP_HEADER: &str = "strategy,k,map_av,map_va,map_avg";

/// Trains one model for the given strategy and k and evaluates it.
pub fn sweep_point(
    train_set: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    strategy: LossKind,
    k: usize,
) -> Result<SweepRow> {
    let mut cfg = base.clone();
    cfg.loss.kind = strategy;
    cfg.k = k;
    cfg.eval_every = 0;
    cfg.checkpoint_path = None;
    cfg.trace_path = None;
    let t = train(train_set, None, cfg.clone())?;
    let e = t.model.evaluate(test, &cfg.k_grid, cfg.proxy_eval())?;
    Ok(SweepRow {
        strategy,
        k,
        map_av: e.audio_to_visual.map,
        map_va: e.visual_to_audio.map,
    })
}

/// One full training run per (strategy, k), strategies outermost. Runs
/// are independent, so `jobs > 1` spreads them over threads without
/// changing any result.
pub fn sweep_k(
    train_set: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    strategies: &[LossKind],
    ks: &[usize],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || strategies.is_empty() {
        return Err(Error::Config("sweep needs at least one k and one strategy".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("sweep needs at least one job".into()));
    }
    let points: Vec<(LossKind, usize)> = strategies
        .iter()
        .flat_map(|&s| ks.iter().map(move |&k| (s, k)))
        .collect();
    if jobs == 1 {
        return points
            .iter()
            .map(|&(s, k)| sweep_point(train_set, test, base, s, k))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<SweepRow>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(points.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(s, k)) = points.get(i) else { break };
                let row = sweep_point(train_set, test, base, s, k);
                *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(row);
            });
        }
    });
    results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .unwrap_or_else(|| Err(Error::contract("sweep point was not run")))
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.strategy.as_str(),
            r.k,
            r.map_av,
            r.map_va,
            r.map_avg()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny() -> (Dataset, Dataset) {
        let d = synth_generate(&SynthConfig {
            classes: 3,
            per_class: 8,
            audio_dim: 4,
            visual_dim: 6,
            class_separation: 10.0,
            noise_sigma: 1.0,
            seed: 3,
        })
        .unwrap();
        let split = d.stratified_split(0.75, 3).unwrap();
        d.apply_split(&split).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            hidden: 8,
            eval_every: 1,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trace_has_one_row_per_epoch() {
        let (tr, te) = tiny();
        let t = train(&tr, Some(&te), tiny_config()).unwrap();
        assert_eq!(t.trace.len(), 3);
        assert!(t.trace.iter().all(|r| r.map_av.is_some()));
        let csv = trace_csv(&t.trace);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(TRACE_HEADER));
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let (tr, te) = tiny();
        let a = train(&tr, Some(&te), tiny_config()).unwrap();
        let b = train(&tr, Some(&te), tiny_config()).unwrap();
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    }

    #[test]
    fn whole_split_graph_scope_trains() {
        let (tr, te) = tiny();
        let cfg = TrainConfig {
            graph_scope: GraphScope::PerEpochFull,
            batch_size: 5,
            ..tiny_config()
        };
        let t = train(&tr, Some(&te), cfg).unwrap();
        assert!(t.trace.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                k: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn single_k_sweep_has_one_row() {
        let (tr, te) = tiny();
        let rows = sweep_k(&tr, &te, &tiny_config(), &[LossKind::Triplet], &[1], 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((0.0..=1.0).contains(&rows[0].map_avg()));
    }

    #[test]
    fn threaded_sweep_matches_sequential() {
        let (tr, te) = tiny();
        let strategies = [LossKind::Triplet, LossKind::HardTriplet];
        let one = sweep_k(&tr, &te, &tiny_config(), &strategies, &[1, 2], 1).unwrap();
        let three = sweep_k(&tr, &te, &tiny_config(), &strategies, &[1, 2], 3).unwrap();
        assert_eq!(one, three);
        assert!(sweep_k(&tr, &te, &tiny_config(), &strategies, &[1], 0).is_err());
    }
}

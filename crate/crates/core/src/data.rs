//! Paired audio-visual samples, synthetic generation and batching.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_AUDIO_DIM: usize = 128;
pub const DEFAULT_VISUAL_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// One video: its audio features, visual features and multi-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct AVPair {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub label: Vec<u8>,
}

impl AVPair {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.label.len() != classes {
            return Err(Error::contract(format!(
                "label has length {} but the dataset has {classes} categories",
                self.label.len()
            )));
        }
        if self.label.iter().any(|&b| b > 1) {
            return Err(Error::contract("label entries must be 0 or 1"));
        }
        if !self.label.contains(&1) {
            return Err(Error::contract("label has no active category"));
        }
        if !self.audio.iter().chain(&self.visual).all(|v| v.is_finite()) {
            return Err(Error::contract("feature vector contains a non-finite value"));
        }
        Ok(())
    }
}

/// True when two multi-hot labels share at least one category.
pub fn labels_overlap(a: &[u8], b: &[u8]) -> bool {
    a.iter().zip(b).any(|(&x, &y)| x == 1 && y == 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pairs: Vec<AVPair>,
    classes: usize,
    audio_dim: usize,
    visual_dim: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(pairs: Vec<AVPair>, classes: usize, split: Split, provenance: impl Into<String>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::contract("a dataset needs at least one pair"))?;
        let (audio_dim, visual_dim) = (first.audio.len(), first.visual.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.audio.len() != audio_dim || p.visual.len() != visual_dim {
                return Err(Error::contract(format!(
                    "pair {i} has dims ({}, {}) but pair 0 has ({audio_dim}, {visual_dim})",
                    p.audio.len(),
                    p.visual.len()
                )));
            }
            p.validate(classes)
                .map_err(|e| Error::contract(format!("pair {i}: {e}")))?;
        }
        Ok(Self {
            pairs,
            classes,
            audio_dim,
            visual_dim,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn pairs(&self) -> &[AVPair] {
        &self.pairs
    }

    pub fn pair(&self, i: usize) -> &AVPair {
        &self.pairs[i]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        &self.pairs[i].label
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.pairs.iter().map(|p| p.label.clone()).collect()
    }

    pub fn feature_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_dim,
            Modality::Visual => self.visual_dim,
        }
    }

    /// Stacks one modality's features for the given rows into a matrix.
    pub fn features(&self, m: Modality, indices: &[usize]) -> Tensor {
        let dim = self.feature_dim(m);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            let p = &self.pairs[i];
            data.extend_from_slice(match m {
                Modality::Audio => &p.audio,
                Modality::Visual => &p.visual,
            });
        }
        Tensor::new(vec![indices.len(), dim], data).expect("consistent dims")
    }

    /// Label rows as a `len x c` matrix of 0.0/1.0.
    pub fn label_matrix(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            data.extend(self.pairs[i].label.iter().map(|&b| f64::from(b)));
        }
        Tensor::new(vec![indices.len(), self.classes], data).expect("consistent dims")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        Dataset::new(pairs, self.classes, split, self.provenance.clone())
    }

    /// Index of the first active category of each pair.
    pub fn primary_classes(&self) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|p| p.label.iter().position(|&b| b == 1).unwrap_or(0))
            .collect()
    }

    /// Stratified split: per primary class, a seeded shuffle assigns
    /// `round(train_fraction * count)` members to train (at least one).
    pub fn stratified_split(&self, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let primary = self.primary_classes();
        let mut assignment = vec![Split::Test; self.len()];
        let mut rng = seed::rng(seed, &[seed::STREAM_SPLIT]);
        for class in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| primary[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let n_train = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len());
            for &i in &members[..n_train] {
                assignment[i] = Split::Train;
            }
        }
        Ok(assignment)
    }

    pub fn apply_split(&self, assignment: &[Split]) -> Result<(Dataset, Dataset)> {
        if assignment.len() != self.len() {
            return Err(Error::contract(format!(
                "split manifest covers {} samples but the dataset has {}",
                assignment.len(),
                self.len()
            )));
        }
        let pick = |s: Split| -> Vec<usize> { (0..self.len()).filter(|&i| assignment[i] == s).collect() };
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        if train.is_empty() || test.is_empty() {
            return Err(Error::contract("split leaves the train or test side empty"));
        }
        Ok((self.subset(&train, Split::Train)?, self.subset(&test, Split::Test)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 50,
            audio_dim: DEFAULT_AUDIO_DIM,
            visual_dim: DEFAULT_VISUAL_DIM,
            class_separation: 10.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

const CENTROID_RETRIES: usize = 1000;

fn place_centroids(rng: &mut impl Rng, classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    // Centroids sit on the sphere of radius `separation`, so a pair meets the
    // distance requirement exactly when their angle is at least 60 degrees.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut placed = false;
        for _ in 0..CENTROID_RETRIES {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let c: Vec<f64> = raw.iter().map(|v| v / norm * separation).collect();
            let ok = centroids
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation);
            if ok {
                centroids.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place centroid {class} of {classes} in {dim} dimensions with separation {separation} after {CENTROID_RETRIES} attempts"
            )));
        }
    }
    Ok(centroids)
}

/// Gaussian clusters around per-class audio and visual centroids, with
/// one-hot labels and aligned pairs. Samples are emitted class by class.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.audio_dim == 0 || cfg.visual_dim == 0 {
        return Err(Error::Config(
            "classes, per-class count and dimensions must be positive".into(),
        ));
    }
    if !(cfg.class_separation > 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config(
            "class separation must be > 0 and noise sigma >= 0".into(),
        ));
    }
    if cfg.classes == 1 {
        log::warn!("single-class dataset: metric losses will have no negatives and stay inert");
    }
    let mut rng = seed::rng(cfg.seed, &[seed::STREAM_SYNTH]);
    let audio_c = place_centroids(&mut rng, cfg.classes, cfg.audio_dim, cfg.class_separation)?;
    let visual_c = place_centroids(&mut rng, cfg.classes, cfg.visual_dim, cfg.class_separation)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;

    let mut pairs = Vec::with_capacity(cfg.classes * cfg.per_class);
    for class in 0..cfg.classes {
        for _ in 0..cfg.per_class {
            let mut jitter = |c: &[f64]| -> Vec<f64> {
                c.iter()
                    .map(|&v| {
                        if cfg.noise_sigma == 0.0 {
                            v
                        } else {
                            v + noise.sample(&mut rng)
                        }
                    })
                    .collect()
            };
            let audio = jitter(&audio_c[class]);
            let visual = jitter(&visual_c[class]);
            let mut label = vec![0u8; cfg.classes];
            label[class] = 1;
            pairs.push(AVPair { audio, visual, label });
        }
    }
    Dataset::new(pairs, cfg.classes, Split::All, format!("synthetic seed={}", cfg.seed))
}

/// Seeded per-epoch order for mini-batching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub epoch: u64,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Batching(format!("batch size {batch_size} is below 2")));
        }
        if n < 2 {
            return Err(Error::Batching(format!("dataset of {n} samples is too small to batch")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed, &[seed::STREAM_BATCH, epoch]));
        Ok(Self {
            seed,
            batch_size,
            epoch,
            order,
        })
    }

    /// Consecutive chunks of the shuffled order. A trailing chunk of one
    /// sample is merged into the previous batch.
    pub fn batches(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let tail = out.pop().unwrap();
            out.last_mut().unwrap().extend(tail);
        }
        out
    }
}

pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    Ok(BatchPlan::new(n, batch_size, seed, epoch)?.batches())
}

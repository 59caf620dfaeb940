//! Cross-modal retrieval evaluation: cosine ranking, average precision,
//! MAP and precision at a grid of cut-offs.

use std::fmt::Write as _;

use crate::data::{labels_overlap, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K_GRID: [usize; 7] = [10, 20, 50, 100, 200, 500, 1000];

/// Gallery indices ordered by descending cosine similarity to `query`,
/// ties by ascending index. A zero-norm query (or gallery row) has no
/// defined similarity; it scores 0 so the order falls back to index order.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    if gallery.cols() != query.len() {
        return Err(Error::shape("rank_gallery", &[query.len()], gallery.shape()));
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        log::warn!("zero-norm query: gallery ranked by index");
    }
    let mut scored: Vec<(usize, f64)> = (0..gallery.rows())
        .map(|j| {
            let row = gallery.row(j);
            let gn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if qn == 0.0 || gn == 0.0 {
                0.0
            } else {
                query.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (qn * gn)
            };
            (j, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

/// Mean of precision@r over the ranks `r` of relevant items, or `None`
/// when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Precision among the top `min(K, len)` items for each `K`.
pub fn precision_at_scope(relevant: &[bool], grid: &[usize]) -> Result<Vec<(usize, f64)>> {
    if relevant.is_empty() {
        return Err(Error::Evaluation("precision over an empty ranking".into()));
    }
    grid.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::Evaluation("precision cut-off must be at least 1".into()));
            }
            let top = k.min(relevant.len());
            let hits = relevant[..top].iter().filter(|&&r| r).count();
            Ok((k, hits as f64 / top as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AudioToVisual,
    VisualToAudio,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AudioToVisual => "A->V",
            Direction::VisualToAudio => "V->A",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::AudioToVisual => "av",
            Direction::VisualToAudio => "va",
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::AudioToVisual => Modality::Audio,
            Direction::VisualToAudio => Modality::Visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Per-query AP; `None` for queries with no relevant gallery item.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    /// Precision averaged over queries for each cut-off.
    pub precision: Vec<(usize, f64)>,
    pub queries: usize,
    pub gallery: usize,
    pub excluded: usize,
}

/// Ranks every query row against all gallery rows.
pub fn retrieve(
    direction: Direction,
    queries: &Tensor,
    gallery: &Tensor,
    query_labels: &[Vec<u8>],
    gallery_labels: &[Vec<u8>],
    grid: &[usize],
) -> Result<RetrievalReport> {
    if queries.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::Evaluation("empty query set or gallery".into()));
    }
    if query_labels.len() != queries.rows() || gallery_labels.len() != gallery.rows() {
        return Err(Error::Evaluation("label count does not match the embeddings".into()));
    }
    let mut ap = Vec::with_capacity(queries.rows());
    let mut precision_sum = vec![0.0; grid.len()];
    for q in 0..queries.rows() {
        let order = rank_gallery(queries.row(q), gallery)?;
        let rel: Vec<bool> = order
            .iter()
            .map(|&j| labels_overlap(&query_labels[q], &gallery_labels[j]))
            .collect();
        ap.push(average_precision(&rel));
        for (s, (_, p)) in precision_sum.iter_mut().zip(precision_at_scope(&rel, grid)?) {
            *s += p;
        }
    }
    let scored: Vec<f64> = ap.iter().flatten().copied().collect();
    let excluded = ap.len() - scored.len();
    if scored.is_empty() {
        return Err(Error::Evaluation("no query has a relevant gallery item".into()));
    }
    let map = scored.iter().sum::<f64>() / scored.len() as f64;
    let nq = queries.rows() as f64;
    Ok(RetrievalReport {
        direction,
        ap,
        map,
        precision: grid.iter().zip(precision_sum).map(|(&k, s)| (k, s / nq)).collect(),
        queries: queries.rows(),
        gallery: gallery.rows(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub audio_to_visual: RetrievalReport,
    pub visual_to_audio: RetrievalReport,
}

impl Evaluation {
    pub fn average_map(&self) -> f64 {
        (self.audio_to_visual.map + self.visual_to_audio.map) / 2.0
    }

    pub fn reports(&self) -> [&RetrievalReport; 2] {
        [&self.audio_to_visual, &self.visual_to_audio]
    }

    /// Rows `direction,metric,value` for MAP, query counts and the average.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("direction,metric,value\n");
        for r in self.reports() {
            let d = r.direction.tag();
            let _ = writeln!(s, "{d},map,{}", r.map);
            let _ = writeln!(s, "{d},queries,{}", r.queries);
            let _ = writeln!(s, "{d},gallery,{}", r.gallery);
            let _ = writeln!(s, "{d},excluded_queries,{}", r.excluded);
        }
        let _ = writeln!(s, "avg,map,{}", self.average_map());
        s
    }

    /// Rows `direction,k,precision`.
    pub fn precision_csv(&self) -> String {
        let mut s = String::from("direction,k,precision\n");
        for r in self.reports() {
            for (k, p) in &r.precision {
                let _ = writeln!(s, "{},{k},{p}", r.direction.tag());
            }
        }
        s
    }

    /// Rows `query,ap` for one direction; excluded queries have an empty AP.
    pub fn ap_csv(report: &RetrievalReport) -> String {
        let mut s = String::from("query,ap\n");
        for (q, ap) in report.ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "{q},{v}");
                }
                None => {
                    let _ = writeln!(s, "{q},");
                }
            }
        }
        s
    }
}

/// Both retrieval directions over row-aligned audio and visual embeddings.
pub fn evaluate_embeddings(audio: &Tensor, visual: &Tensor, labels: &[Vec<u8>], grid: &[usize]) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Evaluation("empty test split".into()));
    }
    Ok(Evaluation {
        audio_to_visual: retrieve(Direction::AudioToVisual, audio, visual, labels, labels, grid)?,
        visual_to_audio: retrieve(Direction::VisualToAudio, visual, audio, labels, labels, grid)?,
    })
}

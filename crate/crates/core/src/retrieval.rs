//! Pooling, temperature-scaled cosine similarity, the symmetric contrastive
//! loss and recall@K.

use std::fmt;

use thiserror::Error;

use crate::config::CapShape;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Mean over the frame axis: `[.., F, d] → [.., d]`.
pub fn pool_video(g: &mut Graph, frame_cls: Var) -> Result<Var, NumericsError> {
    let axis = g.shape(frame_cls).len().saturating_sub(2);
    g.mean(frame_cls, axis)
}

/// `τ · cos(a, b)`.
pub fn similarity(a: &[f64], b: &[f64], tau: f64) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "similarity",
            shapes: vec![vec![a.len()], vec![b.len()]],
        }
        .into());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok(tau * dot / (na * nb))
}

/// `τ · norm(v)·norm(t)ᵀ` for `v: [B, e]`, `t: [B′, e]`; rows index videos.
/// `tau` is a `[1]` node so it can carry a gradient.
pub fn similarity_matrix(g: &mut Graph, v: Var, t: Var, tau: Var) -> Result<Var, NumericsError> {
    let v = g.l2_normalize(v)?;
    let t = g.l2_normalize(t)?;
    let tt = g.transpose(t)?;
    let cos = g.matmul(v, tt)?;
    g.mul(cos, tau)
}

/// Upper bound on the temperature as a function of the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSchedule {
    pub cap_start: f64,
    pub cap_end: f64,
    pub total_steps: usize,
    pub shape: CapShape,
}

impl TauSchedule {
    /// `cap_start − (cap_start − cap_end)·min(1, step/total)` for the linear
    /// shape. With no steps at all the cap sits at `cap_end`.
    pub fn cap(&self, step: usize) -> f64 {
        match self.shape {
            CapShape::Constant => self.cap_start,
            CapShape::Linear if self.total_steps == 0 => self.cap_end,
            CapShape::Linear => {
                let frac = (step as f64 / self.total_steps as f64).min(1.0);
                self.cap_start - (self.cap_start - self.cap_end) * frac
            }
        }
    }

    pub fn effective(&self, tau: f64, step: usize) -> f64 {
        tau.clamp(1.0, self.cap(step))
    }
}

/// `½(CE(rows) + CE(columns))` with the diagonal as the target.
pub fn contrastive_loss(g: &mut Graph, sim: Var) -> Result<Var, RetrievalError> {
    let s = g.shape(sim).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(RetrievalError::NonSquare {
            rows: s[0],
            cols: s.get(1).copied().unwrap_or(1),
        });
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    let rows = g.cross_entropy(sim, &targets)?;
    let st = g.transpose(sim)?;
    let cols = g.cross_entropy(st, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Tensor-level [`contrastive_loss`].
pub fn contrastive_loss_value(sim: &Tensor) -> Result<f64, RetrievalError> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let l = contrastive_loss(&mut g, s)?;
    Ok(g.value(l).item())
}

/// Query direction of a retrieval report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    T2V,
    V2T,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::T2V => "T2V",
            Self::V2T => "V2T",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl MetricsReport {
    pub fn mean(&self) -> f64 {
        (self.r1 + self.r5 + self.r10) / 3.0
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.2} {:.2} {:.2} {:.2}", self.direction, self.r1, self.r5, self.r10, self.mean())
    }
}

/// Zero-based rank of gallery item `target` in row `row`: the number of items
/// that sort before it in descending order, ties broken by gallery index.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn check_matrix(sim: &Tensor) -> Result<(usize, usize), RetrievalError> {
    match sim.shape() {
        [q, gal] => Ok((*q, *gal)),
        other => Err(NumericsError::ShapeMismatch {
            op: "recall_at_k",
            shapes: vec![other.to_vec()],
        }
        .into()),
    }
}

fn percent_within(ranks: &[usize], k: usize, gallery: usize) -> f64 {
    if k > gallery {
        log::warn!("R@{k} requested over a gallery of {gallery}; reporting 100");
        return 100.0;
    }
    let hits = ranks.iter().filter(|&&r| r < k).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// Recall at each `k` for `sim: [Q, G]` with one ground-truth gallery index
/// per query. The mapping must be injective.
pub fn recall_at_k(sim: &Tensor, ground_truth: &[usize], ks: &[usize]) -> Result<Vec<f64>, RetrievalError> {
    let (q, gal) = check_matrix(sim)?;
    if ground_truth.len() != q {
        return Err(RetrievalError::GroundTruth(format!("{} entries for {q} queries", ground_truth.len())));
    }
    let mut seen = vec![false; gal];
    for &t in ground_truth {
        if t >= gal {
            return Err(RetrievalError::GroundTruth(format!("index {t} outside gallery of {gal}")));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(RetrievalError::GroundTruth(format!("index {t} assigned twice")));
        }
    }
    let ranks: Vec<usize> = (0..q).map(|i| rank_of(sim.row(i), ground_truth[i])).collect();
    Ok(ks.iter().map(|&k| percent_within(&ranks, k, gal)).collect())
}

/// Recall where any gallery item with `relevant(query, item)` counts as a
/// hit. Used when several gallery items share one caption.
pub fn recall_at_k_sets(
    sim: &Tensor,
    relevant: impl Fn(usize, usize) -> bool,
    ks: &[usize],
) -> Result<Vec<f64>, RetrievalError> {
    let (q, gal) = check_matrix(sim)?;
    let mut ranks = Vec::with_capacity(q);
    for i in 0..q {
        let row = sim.row(i);
        let best = (0..gal)
            .filter(|&j| relevant(i, j))
            .map(|j| rank_of(row, j))
            .min()
            .ok_or_else(|| RetrievalError::GroundTruth(format!("query {i} has no relevant item")))?;
        ranks.push(best);
    }
    Ok(ks.iter().map(|&k| percent_within(&ranks, k, gal)).collect())
}

pub fn report(direction: Direction, recalls: &[f64]) -> MetricsReport {
    MetricsReport {
        direction,
        r1: recalls[0],
        r5: recalls[1],
        r10: recalls[2],
    }
}

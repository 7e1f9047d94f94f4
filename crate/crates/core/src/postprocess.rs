//! Test-time merging: greedy NMS, weighted box voting, the two multi-run
//! merge strategies (union + NMS for proposals, averaging for recognition
//! outputs) and classification-only context score fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou, BBox, BoxError, ScoredBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostprocessError {
    #[error("runs are not index-aligned: run {run} has {got} entries, expected {expected}")]
    Alignment { run: usize, expected: usize, got: usize },
    #[error("nothing to merge")]
    NoRuns,
    #[error("score vector has {scores} entries but the prior has {prior}")]
    Dimension { scores: usize, prior: usize },
    #[error("context prior weights must be finite and positive")]
    InvalidPrior,
    #[error("invalid merge policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown NMS preset '{0}' (expected imagenet, voc, coco or classic)")]
    UnknownPreset(String),
    #[error(transparent)]
    Box(#[from] BoxError),
}

/// Per-dataset NMS thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsPreset {
    #[default]
    Imagenet,
    Voc,
    Coco,
    Classic,
}

impl NmsPreset {
    pub fn threshold(self) -> f64 {
        match self {
            NmsPreset::Imagenet => 0.4,
            NmsPreset::Voc | NmsPreset::Coco => 0.45,
            NmsPreset::Classic => 0.3,
        }
    }
}

impl FromStr for NmsPreset {
    type Err = PostprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "imagenet" => Ok(NmsPreset::Imagenet),
            "voc" => Ok(NmsPreset::Voc),
            "coco" => Ok(NmsPreset::Coco),
            "classic" => Ok(NmsPreset::Classic),
            _ => Err(PostprocessError::UnknownPreset(s.to_string())),
        }
    }
}

impl fmt::Display for NmsPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            NmsPreset::Imagenet => "imagenet",
            NmsPreset::Voc => "voc",
            NmsPreset::Coco => "coco",
            NmsPreset::Classic => "classic",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    UnionNms,
    Average,
}

/// How runs at several scales and flips are combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub mode: MergeMode,
    pub nms_iou: f64,
    pub vote_iou: Option<f64>,
    /// Short-side lengths to test at; empty means native resolution only.
    pub scales: Vec<u32>,
    pub flip: bool,
}

impl MergePolicy {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.nms_iou) {
            return Err(PostprocessError::InvalidPolicy(format!(
                "nms_iou must lie in (0, 1), got {}",
                self.nms_iou
            )));
        }
        if let Some(v) = self.vote_iou {
            if !open(v) {
                return Err(PostprocessError::InvalidPolicy(format!(
                    "vote_iou must lie in (0, 1), got {v}"
                )));
            }
        }
        if self.scales.contains(&0) {
            return Err(PostprocessError::InvalidPolicy("scales must be positive".into()));
        }
        Ok(())
    }
}

/// Score-descending order, ties broken by lower index.
fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score().total_cmp(&boxes[a].score()).then(a.cmp(&b)));
    order
}

/// Indices of greedy-NMS survivors in output order, stopping after `limit`.
///
/// A box is dropped when its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms_indices(boxes: &[ScoredBox], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    if limit == 0 {
        return kept;
    }
    for i in score_order(boxes) {
        let b = &boxes[i].bbox;
        if kept.iter().all(|&k| iou(&boxes[k].bbox, b) <= iou_threshold) {
            kept.push(i);
            if kept.len() == limit {
                break;
            }
        }
    }
    kept
}

/// Greedy non-maximum suppression. Output is sorted by score.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    nms_top_n(boxes, iou_threshold, usize::MAX)
}

/// NMS followed by truncation to `top_n`.
pub fn nms_top_n(boxes: &[ScoredBox], iou_threshold: f64, top_n: usize) -> Vec<ScoredBox> {
    nms_indices(boxes, iou_threshold, top_n)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

/// Replaces `kept`'s coordinates by the score-weighted mean of itself and every
/// pool box overlapping it by at least `vote_iou`. The score is unchanged.
///
/// `pool` should not contain `kept` itself; it always votes once.
pub fn box_vote(kept: &ScoredBox, pool: &[ScoredBox], vote_iou: f64) -> ScoredBox {
    let mut acc = [0.0f64; 4];
    let mut total = 0.0;
    let voters = std::iter::once(kept).chain(pool.iter().filter(|p| iou(&p.bbox, &kept.bbox) >= vote_iou));
    for v in voters {
        let w = v.score();
        for (a, c) in acc.iter_mut().zip(v.bbox.coords()) {
            *a += w * c;
        }
        total += w;
    }
    if total <= 0.0 {
        return *kept;
    }
    let [x1, y1, x2, y2] = acc.map(|a| a / total);
    // weighted means of ordered corners stay ordered up to rounding
    match BBox::new(x1, y1, x2.max(x1), y2.max(y1)) {
        Ok(bbox) => {
            let mut out = *kept;
            out.bbox = bbox;
            out
        }
        Err(_) => *kept,
    }
}

/// Union of all runs, suppressed and truncated. Runs must already be in
/// original-image coordinates.
pub fn merge_rpn(runs: &[Vec<ScoredBox>], nms_iou: f64, top_n: usize) -> Vec<ScoredBox> {
    let all: Vec<ScoredBox> = runs.iter().flatten().copied().collect();
    nms_top_n(&all, nms_iou, top_n)
}

/// Recognition-stage output for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct FrcnOutput {
    pub class_scores: Vec<f64>,
    pub bbox: BBox,
}

/// Mean that does not depend on the order of `values` and returns the common
/// value exactly when all are equal.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let spread: f64 = values.iter().map(|v| v - base).sum();
    base + spread / values.len() as f64
}

/// Per-proposal arithmetic mean of scores and boxes across runs.
pub fn merge_frcn(runs: &[Vec<FrcnOutput>]) -> Result<Vec<FrcnOutput>, PostprocessError> {
    let first = runs.first().ok_or(PostprocessError::NoRuns)?;
    for (r, run) in runs.iter().enumerate() {
        if run.len() != first.len() {
            return Err(PostprocessError::Alignment {
                run: r,
                expected: first.len(),
                got: run.len(),
            });
        }
    }
    let mut column = vec![0.0; runs.len()];
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let dims = first[i].class_scores.len();
        for (r, run) in runs.iter().enumerate() {
            if run[i].class_scores.len() != dims {
                return Err(PostprocessError::Alignment {
                    run: r,
                    expected: dims,
                    got: run[i].class_scores.len(),
                });
            }
        }
        let mut mean_of = |f: &dyn Fn(&FrcnOutput) -> f64| {
            for (slot, run) in column.iter_mut().zip(runs) {
                *slot = f(&run[i]);
            }
            stable_mean(&mut column)
        };
        let class_scores = (0..dims).map(|c| mean_of(&|o| o.class_scores[c])).collect();
        let coords: Vec<f64> = (0..4).map(|k| mean_of(&|o| o.bbox.coords()[k])).collect();
        out.push(FrcnOutput {
            class_scores,
            bbox: BBox::new(coords[0], coords[1], coords[2], coords[3])?,
        });
    }
    Ok(out)
}

/// Positive per-class weights applied to classification scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPrior {
    weights: Vec<f64>,
}

impl ContextPrior {
    pub fn new(weights: Vec<f64>) -> Result<Self, PostprocessError> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(PostprocessError::InvalidPrior);
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The same prior with a unit weight for background prepended at index 0.
    pub fn with_background(&self) -> Self {
        let mut weights = Vec::with_capacity(self.weights.len() + 1);
        weights.push(1.0);
        weights.extend_from_slice(&self.weights);
        Self { weights }
    }
}

/// Rescales `scores` to sum to one. All-zero input is returned unchanged.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|s| s / total).collect()
    } else {
        scores.to_vec()
    }
}

/// Multiplies class scores by the prior and renormalizes. Only scores are
/// touched; boxes never see the prior.
pub fn apply_context_prior(scores: &[f64], prior: &ContextPrior) -> Result<Vec<f64>, PostprocessError> {
    if scores.len() != prior.weights.len() {
        return Err(PostprocessError::Dimension {
            scores: scores.len(),
            prior: prior.weights.len(),
        });
    }
    let weighted: Vec<f64> = scores.iter().zip(&prior.weights).map(|(s, w)| s * w).collect();
    Ok(normalize_scores(&weighted))
}

/// O(n^2) textbook NMS: each kept box suppresses every later box.
#[cfg(test)]
pub(crate) fn reference_nms(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(boxes[i]);
        for &j in &order[pos + 1..] {
            if iou(&boxes[i].bbox, &boxes[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

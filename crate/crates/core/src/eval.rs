//! Proposal recall, average recall and VOC-style average precision.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::{debug, warn};
use thiserror::Error;

use crate::boxes::{iou, BBox, ScoredBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("proposal budget must be positive")]
    ZeroBudget,
    #[error("malformed report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// An IoU threshold in hundredths, usable as a map key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IouKey(pub u32);

impl IouKey {
    pub fn from_f64(t: f64) -> Self {
        IouKey((t * 100.0).round() as u32)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl fmt::Display for IouKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

/// {0.50, 0.55, ..., 0.95}.
pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn top_budget(proposals: &[ScoredBox], budget: usize) -> Vec<&ScoredBox> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score().total_cmp(&proposals[a].score()).then(a.cmp(&b)));
    order.truncate(budget);
    order.into_iter().map(|i| &proposals[i]).collect()
}

/// Best IoU each ground truth reaches among the top-`budget` proposals.
fn best_overlaps(proposals: &[ScoredBox], gts: &[BBox], budget: usize) -> Vec<f64> {
    let top = top_budget(proposals, budget);
    gts.iter()
        .map(|g| top.iter().map(|p| iou(&p.bbox, g)).fold(0.0, f64::max))
        .collect()
}

/// Fraction of ground truths covered at `iou_t` by one of the `budget`
/// highest-scoring proposals. Vacuously 1 without ground truth.
pub fn proposal_recall(proposals: &[ScoredBox], gts: &[BBox], iou_t: f64, budget: usize) -> Result<f64, EvalError> {
    if budget == 0 {
        return Err(EvalError::ZeroBudget);
    }
    if gts.is_empty() {
        debug!("recall over zero ground truths defined as 1.0");
        return Ok(1.0);
    }
    let best = best_overlaps(proposals, gts, budget);
    Ok(best.iter().filter(|&&v| v >= iou_t).count() as f64 / gts.len() as f64)
}

/// Mean of [`proposal_recall`] over [`ar_thresholds`].
pub fn average_recall(proposals: &[ScoredBox], gts: &[BBox], budget: usize) -> Result<f64, EvalError> {
    if budget == 0 {
        return Err(EvalError::ZeroBudget);
    }
    if gts.is_empty() {
        debug!("recall over zero ground truths defined as 1.0");
        return Ok(1.0);
    }
    let best = best_overlaps(proposals, gts, budget);
    let thresholds = ar_thresholds();
    let hits: usize = thresholds
        .iter()
        .map(|t| best.iter().filter(|&&v| v >= *t).count())
        .sum();
    Ok(hits as f64 / (gts.len() * thresholds.len()) as f64)
}

/// Dataset-level recall: covered ground truths pooled over scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallCounter {
    thresholds: Vec<f64>,
    covered: Vec<usize>,
    total: usize,
    budget: usize,
}

impl RecallCounter {
    pub fn new(thresholds: &[f64], budget: usize) -> Result<Self, EvalError> {
        if budget == 0 {
            return Err(EvalError::ZeroBudget);
        }
        Ok(Self {
            thresholds: thresholds.to_vec(),
            covered: vec![0; thresholds.len()],
            total: 0,
            budget,
        })
    }

    pub fn add(&mut self, proposals: &[ScoredBox], gts: &[BBox]) {
        let best = best_overlaps(proposals, gts, self.budget);
        for (count, t) in self.covered.iter_mut().zip(&self.thresholds) {
            *count += best.iter().filter(|&&v| v >= *t).count();
        }
        self.total += gts.len();
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn recall(&self, i: usize) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.covered[i] as f64 / self.total as f64
        }
    }

    pub fn recalls(&self) -> Vec<(f64, f64)> {
        (0..self.thresholds.len()).map(|i| (self.thresholds[i], self.recall(i))).collect()
    }

    pub fn mean(&self) -> f64 {
        if self.thresholds.is_empty() {
            return 0.0;
        }
        (0..self.thresholds.len()).map(|i| self.recall(i)).sum::<f64>() / self.thresholds.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class_id: u32,
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    /// Matched the ground truth with this index.
    TruePositive(usize),
    FalsePositive,
    /// Best match is a difficult object; neither TP nor FP.
    Ignored,
}

/// Greedy score-ordered matching for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in score order.
    pub order: Vec<usize>,
    /// Flag of each detection, indexed like the input detections.
    pub flags: Vec<MatchFlag>,
    /// Whether each ground truth was matched.
    pub covered: Vec<bool>,
}

/// Matches detections to ground truth in descending score order (ties by
/// index). Each detection takes its best-overlapping ground truth; a second
/// hit on an already matched object is a false positive.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_t: f64) -> MatchResult {
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(j);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut covered = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    for &d in &order {
        let Some(candidates) = by_image.get(&dets[d].image) else {
            continue;
        };
        let mut best = None;
        let mut best_iou = f64::NEG_INFINITY;
        for &j in candidates {
            let v = iou(&dets[d].bbox, &gts[j].bbox);
            if v > best_iou {
                best_iou = v;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            if best_iou >= iou_t {
                flags[d] = if gts[j].difficult {
                    MatchFlag::Ignored
                } else if !covered[j] {
                    covered[j] = true;
                    MatchFlag::TruePositive(j)
                } else {
                    MatchFlag::FalsePositive
                };
            }
        }
    }
    MatchResult { order, flags, covered }
}

/// Area under the all-point interpolated precision/recall curve.
pub fn ap_from_flags(flags_in_order: &[MatchFlag], n_positive: usize) -> f64 {
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in flags_in_order {
        match f {
            MatchFlag::TruePositive(_) => tp += 1,
            MatchFlag::FalsePositive => fp += 1,
            MatchFlag::Ignored => continue,
        }
        recall.push(tp as f64 / n_positive as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Average precision of one class, or `None` when it has no non-difficult
/// ground truth.
pub fn voc_ap(detections: &[Detection], gts: &[GroundTruth], class_id: u32, iou_t: f64) -> Option<f64> {
    let dets: Vec<Detection> = detections.iter().filter(|d| d.class_id == class_id).copied().collect();
    let class_gts: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).copied().collect();
    let n_positive = class_gts.iter().filter(|g| !g.difficult).count();
    if n_positive == 0 {
        return None;
    }
    let m = match_detections(&dets, &class_gts, iou_t);
    let ordered: Vec<MatchFlag> = m.order.iter().map(|&d| m.flags[d]).collect();
    Some(ap_from_flags(&ordered, n_positive))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub per_class: BTreeMap<u32, f64>,
    /// Unweighted mean over classes with ground truth.
    pub mean: Option<f64>,
}

pub fn mean_ap(detections: &[Detection], gts: &[GroundTruth], n_classes: u32, iou_t: f64) -> MapResult {
    let mut per_class = BTreeMap::new();
    for c in 0..n_classes {
        match voc_ap(detections, gts, c, iou_t) {
            Some(ap) => {
                per_class.insert(c, ap);
            }
            None => debug!("class {c} has no ground truth; excluded from mAP"),
        }
    }
    let mean = if per_class.is_empty() {
        warn!("no class has ground truth; mAP undefined");
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    MapResult { per_class, mean }
}

/// Metrics of one experiment run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub proposal_budget: usize,
    pub recall_at: BTreeMap<IouKey, f64>,
    pub average_recall: f64,
    /// Per-class AP at IoU 0.5.
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map_at: BTreeMap<IouKey, f64>,
}

impl EvalReport {
    pub fn recall(&self, t: f64) -> Option<f64> {
        self.recall_at.get(&IouKey::from_f64(t)).copied()
    }

    pub fn map(&self, t: f64) -> Option<f64> {
        self.map_at.get(&IouKey::from_f64(t)).copied()
    }

    /// `key = value` lines. Floats use the shortest exact representation.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("proposal_budget = {}", self.proposal_budget)];
        lines.extend(self.recall_at.iter().map(|(k, v)| format!("recall@{k} = {v:?}")));
        lines.push(format!("average_recall = {:?}", self.average_recall));
        lines.extend(self.map_at.iter().map(|(k, v)| format!("map@{k} = {v:?}")));
        lines.extend(self.per_class_ap.iter().map(|(c, v)| format!("ap@0.50/class_{c} = {v:?}")));
        lines
    }

    /// Parses one line produced by [`EvalReport::to_kv_lines`]. Returns
    /// `false` for keys that are not report keys.
    pub fn apply_kv(&mut self, key: &str, value: &str, line: usize) -> Result<bool, EvalError> {
        let err = |message: String| EvalError::Parse { line, message };
        let float = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
        let threshold = |k: &str| {
            k.parse::<f64>()
                .map(IouKey::from_f64)
                .map_err(|e| err(format!("bad threshold in {key}: {e}")))
        };
        if key == "proposal_budget" {
            self.proposal_budget = value.parse().map_err(|e| err(format!("{key}: {e}")))?;
        } else if key == "average_recall" {
            self.average_recall = float(value)?;
        } else if let Some(rest) = key.strip_prefix("recall@") {
            self.recall_at.insert(threshold(rest)?, float(value)?);
        } else if let Some(rest) = key.strip_prefix("map@") {
            self.map_at.insert(threshold(rest)?, float(value)?);
        } else if let Some(rest) = key.strip_prefix("ap@0.50/class_") {
            let c = rest.parse().map_err(|e| err(format!("{key}: {e}")))?;
            self.per_class_ap.insert(c, float(value)?);
        } else {
            return Ok(false);
        }
        Ok(true)
    }
}

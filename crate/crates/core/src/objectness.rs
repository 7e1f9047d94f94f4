//! A tiny trainable objectness head.
//!
//! The head rescores noisy overlap evidence `e` of an anchor as
//! `sigmoid(slope * logit(e) + bias[template])`. It is trained by SGD on
//! anchor batches drawn with the sampling strategies, which makes the effect
//! of batch composition on proposal ranking measurable: a head that leans on
//! its per-template biases instead of the evidence ranks proposals worse.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::boxes::{generate_anchors, BBox, BoxError};
use crate::cascade::{CascadeError, ScoreContext, ScoreOutput, Scorer};
use crate::rng::{substream, tag};
use crate::sampling::{
    image_batch, label_anchors, negative_image_batch, ohem_select, BatchPolicy, ClsRow, LabelThresholds,
    SamplerState, SamplingError, OHEM_BACKWARD, OHEM_FORWARD,
};
use crate::simgen::{render_at_scale, Dataset, OracleScorer, SimError};

const EVIDENCE_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Box(#[from] BoxError),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn evidence_logit(e: f64) -> f64 {
    let e = e.clamp(EVIDENCE_EPS, 1.0 - EVIDENCE_EPS);
    (e / (1.0 - e)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessHead {
    pub slope: f64,
    /// One bias per anchor template.
    pub bias: Vec<f64>,
}

impl ObjectnessHead {
    pub fn new(n_templates: usize) -> Self {
        Self {
            slope: 0.0,
            bias: vec![0.0; n_templates],
        }
    }

    pub fn prob(&self, evidence: f64, template: u32) -> f64 {
        let b = self.bias.get(template as usize).copied().unwrap_or(0.0);
        sigmoid(self.slope * evidence_logit(evidence) + b)
    }
}

/// How the head is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub policy: BatchPolicy,
    pub thresholds: LabelThresholds,
    /// Class-balanced image order instead of uniform shuffling.
    pub balanced: bool,
    /// Backpropagate only the hardest rows of each batch.
    pub ohem: bool,
    /// Train on object-free scenes too (classification rows only).
    pub negative_images: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on the evidence slope. Biases are not decayed.
    pub weight_decay: f64,
    /// Short sides to jitter over; empty trains at native resolution.
    pub scales: Vec<u32>,
    /// Std-dev of the evidence noise seen during training.
    pub evidence_sigma: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub stride: u32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig("weight decay must be non-negative".into()));
        }
        if !(self.evidence_sigma >= 0.0 && self.evidence_sigma.is_finite()) {
            return Err(TrainError::InvalidConfig("evidence sigma must be non-negative".into()));
        }
        if self.scales.contains(&0) {
            return Err(TrainError::InvalidConfig("training scales must be positive".into()));
        }
        if let BatchPolicy::Constrained(np) = self.policy {
            np.validate()?;
        }
        Ok(())
    }
}

/// Composition of one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchStat {
    pub labeled_positive: usize,
    pub labeled_negative: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ObjectnessHead,
    pub batches: Vec<BatchStat>,
}

fn image_order<R: Rng>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    sampler: &mut Option<SamplerState>,
    rng: &mut R,
) -> Vec<usize> {
    let negatives = dataset
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_negative() && cfg.negative_images)
        .map(|(i, _)| i);
    let mut order: Vec<usize> = match sampler {
        Some(state) => {
            let n_pos = dataset.scenes.iter().filter(|s| !s.is_negative()).count();
            (0..n_pos).map(|_| state.balanced_next()).collect()
        }
        None => dataset
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_negative())
            .map(|(i, _)| i)
            .collect(),
    };
    order.extend(negatives);
    order.shuffle(rng);
    order
}

/// Trains a head from scratch on `dataset`. Deterministic in `seed`.
pub fn train_head(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let n_templates = cfg.anchor_scales.len() * cfg.anchor_ratios.len();
    let mut head = ObjectnessHead::new(n_templates);
    let mut batches = Vec::new();
    let mut sampler = if cfg.balanced {
        Some(SamplerState::new(&dataset.image_classes(), crate::rng::mix(seed, &[tag::TRAIN, 0]))?)
    } else {
        None
    };
    for epoch in 0..cfg.epochs {
        let mut order_rng = substream(seed, &[tag::TRAIN, 1, epoch as u64]);
        let order = image_order(dataset, cfg, &mut sampler, &mut order_rng);
        for (step, &idx) in order.iter().enumerate() {
            let mut rng = substream(seed, &[tag::TRAIN, 2, epoch as u64, step as u64]);
            let original = &dataset.scenes[idx];
            let scene = if cfg.scales.is_empty() {
                original.clone()
            } else {
                let s = cfg.scales[rng.random_range(0..cfg.scales.len())];
                render_at_scale(original, f64::from(s))?.scene
            };
            let anchors = generate_anchors(
                scene.width.ceil() as u32,
                scene.height.ceil() as u32,
                cfg.stride,
                &cfg.anchor_scales,
                &cfg.anchor_ratios,
            )?;
            let boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
            let gts = scene.gt_boxes();
            let labeling = label_anchors(&boxes, &gts, cfg.thresholds);
            let batch = if scene.is_negative() {
                negative_image_batch(&gts, boxes.len(), cfg.policy, &mut rng)
            } else {
                image_batch(&boxes, &gts, &labeling, cfg.policy, &mut rng)
            };
            let batch = match batch {
                Ok(b) => b,
                Err(SamplingError::EmptyBatch) => continue,
                Err(e) => return Err(e.into()),
            };
            batches.push(BatchStat {
                labeled_positive: labeling.positives.len(),
                labeled_negative: labeling.negatives.len(),
                positive: batch.num_positive(),
                negative: batch.num_negative(),
            });
            let rows: Vec<(ClsRow, f64, u32)> = batch
                .cls_rows
                .iter()
                .map(|r| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let e = (labeling.max_iou[r.anchor] + cfg.evidence_sigma * z).clamp(0.0, 1.0);
                    (*r, e, anchors[r.anchor].template_index)
                })
                .collect();
            let rows = if cfg.ohem {
                let mut rows = rows;
                rows.truncate(OHEM_FORWARD);
                let losses: Vec<f64> = rows
                    .iter()
                    .map(|(r, e, t)| {
                        let p = head.prob(*e, *t).clamp(1e-12, 1.0 - 1e-12);
                        if r.positive {
                            -p.ln()
                        } else {
                            -(1.0 - p).ln()
                        }
                    })
                    .collect();
                ohem_select(&losses, OHEM_FORWARD, OHEM_BACKWARD)?
                    .into_iter()
                    .map(|i| rows[i])
                    .collect()
            } else {
                rows
            };
            sgd_step(&mut head, &rows, cfg);
        }
    }
    Ok(TrainOutcome { head, batches })
}

fn sgd_step(head: &mut ObjectnessHead, rows: &[(ClsRow, f64, u32)], cfg: &TrainConfig) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    let mut g_slope = 0.0;
    let mut g_bias = vec![0.0; head.bias.len()];
    for (row, e, t) in rows {
        let y = if row.positive { 1.0 } else { 0.0 };
        let residual = head.prob(*e, *t) - y;
        g_slope += residual * evidence_logit(*e);
        if let Some(g) = g_bias.get_mut(*t as usize) {
            *g += residual;
        }
    }
    head.slope -= cfg.learning_rate * (g_slope / n + cfg.weight_decay * head.slope);
    for (b, g) in head.bias.iter_mut().zip(g_bias) {
        *b -= cfg.learning_rate * g / n;
    }
}

/// Oracle evidence rescored by a trained head; regression is the oracle's.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedScorer {
    pub head: ObjectnessHead,
    pub base: OracleScorer,
}

impl Scorer for LearnedScorer {
    fn score_and_regress(&self, refs: &[BBox], ctx: &ScoreContext<'_>) -> Result<Vec<ScoreOutput>, CascadeError> {
        let mut out = self.base.score_and_regress(refs, ctx)?;
        for (o, t) in out.iter_mut().zip(ctx.templates) {
            o.objectness = self.head.prob(o.objectness, *t);
        }
        Ok(out)
    }
}

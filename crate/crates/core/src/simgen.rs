//! Synthetic scenes and the noisy oracles that stand in for the CNN.
//!
//! Scenes are canvases with labelled ground-truth boxes. The oracle scorers
//! see the ground truth and degrade it with configurable noise: objectness is
//! the best IoU plus Gaussian noise, and regression moves a fraction
//! `reg_shrink` of the way to the best-matching object, plus Gaussian noise
//! in delta space.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{clip_to, decode, encode, flip_h, iou, rescale, BBox, BoxError, RegressionDelta};
use crate::cascade::{CascadeError, ScoreContext, ScoreOutput, Scorer, Stage};
use crate::postprocess::{ContextPrior, FrcnOutput, PostprocessError};
use crate::rng::{substream, tag};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    InvalidSpec(String),
    #[error("could not place an object inside a {width}x{height} canvas after {retries} attempts")]
    Placement { width: f64, height: f64, retries: usize },
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

/// One labelled object. Serialized as `[x1, y1, x2, y2, class_id, difficult]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "(f64, f64, f64, f64, u32, bool)",
    into = "(f64, f64, f64, f64, u32, bool)"
)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_id: u32,
    pub difficult: bool,
}

impl TryFrom<(f64, f64, f64, f64, u32, bool)> for SceneObject {
    type Error = BoxError;

    fn try_from(t: (f64, f64, f64, f64, u32, bool)) -> Result<Self, Self::Error> {
        Ok(Self {
            bbox: BBox::new(t.0, t.1, t.2, t.3)?,
            class_id: t.4,
            difficult: t.5,
        })
    }
}

impl From<SceneObject> for (f64, f64, f64, f64, u32, bool) {
    fn from(o: SceneObject) -> Self {
        let [x1, y1, x2, y2] = o.bbox.coords();
        (x1, y1, x2, y2, o.class_id, o.difficult)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(SimError::InvalidSpec(format!(
                "scene {} has non-positive canvas {}x{}",
                self.id, self.width, self.height
            )));
        }
        for o in &self.objects {
            let b = o.bbox;
            if b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > self.width || b.y2() > self.height {
                return Err(SimError::InvalidSpec(format!(
                    "scene {} object {:?} lies outside the canvas",
                    self.id,
                    b.coords()
                )));
            }
        }
        Ok(())
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn is_negative(&self) -> bool {
        self.objects.is_empty()
    }

    /// The same scene mirrored horizontally.
    pub fn flipped(&self) -> Scene {
        Scene {
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    bbox: flip_h(&o.bbox, self.width),
                    ..*o
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// A scene rendered at another resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledScene {
    pub scene: Scene,
    /// Multiply original coordinates by this to get scaled ones.
    pub factor: f64,
}

impl ScaledScene {
    pub fn to_original(&self, b: &BBox) -> Result<BBox, BoxError> {
        rescale(b, 1.0 / self.factor)
    }
}

/// Isotropic rescale so the short side equals `short_side`.
pub fn render_at_scale(scene: &Scene, short_side: f64) -> Result<ScaledScene, SimError> {
    if !(short_side > 0.0 && short_side.is_finite()) {
        return Err(SimError::InvalidSpec(format!("short side must be positive, got {short_side}")));
    }
    let factor = short_side / scene.width.min(scene.height);
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            Ok(SceneObject {
                bbox: rescale(&o.bbox, factor)?,
                ..*o
            })
        })
        .collect::<Result<_, BoxError>>()?;
    Ok(ScaledScene {
        scene: Scene {
            id: scene.id,
            width: scene.width * factor,
            height: scene.height * factor,
            objects,
        },
        factor,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn num_objects(&self) -> usize {
        self.scenes.iter().map(|s| s.objects.len()).sum()
    }

    /// Class ids of each scene's objects, indexed like `scenes`.
    pub fn image_classes(&self) -> Vec<Vec<u32>> {
        self.scenes
            .iter()
            .map(|s| s.objects.iter().map(|o| o.class_id).collect())
            .collect()
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), SimError> {
        for scene in &self.scenes {
            let line = serde_json::to_string(scene).map_err(|e| SimError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset, SimError> {
        let mut scenes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line).map_err(|e| SimError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            scene.validate().map_err(|e| SimError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            scenes.push(scene);
        }
        Ok(Dataset { scenes })
    }
}

/// Long-tailed class frequencies: `w_c = (1 + c k)^-exponent` with `k` chosen
/// so the first class is `imbalance_ratio` times the last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailSpec {
    pub n_classes: u32,
    pub imbalance_ratio: f64,
    pub exponent: f64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_classes == 0 {
            return Err(SimError::InvalidSpec("n_classes must be at least 1".into()));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(SimError::InvalidSpec(format!(
                "imbalance_ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(SimError::InvalidSpec(format!(
                "exponent must be positive, got {}",
                self.exponent
            )));
        }
        Ok(())
    }

    /// Class probabilities, summing to one.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let n = self.n_classes as usize;
        if n == 1 {
            return vec![1.0];
        }
        let k = (self.imbalance_ratio.powf(1.0 / self.exponent) - 1.0) / (n - 1) as f64;
        let w: Vec<f64> = (0..n)
            .map(|c| (1.0 + c as f64 * k).powf(-self.exponent))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

/// Everything [`generate_dataset`] needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: u32,
    pub imbalance_ratio: f64,
    pub exponent: f64,
    pub n_scenes: usize,
    pub width: f64,
    pub height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub negative_fraction: f64,
    pub min_object_side: f64,
    pub max_side_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            imbalance_ratio: 100.0,
            exponent: 1.0,
            n_scenes: 200,
            width: 480.0,
            height: 320.0,
            min_objects: 1,
            max_objects: 6,
            negative_fraction: 0.0,
            min_object_side: 16.0,
            max_side_fraction: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn long_tail(&self) -> LongTailSpec {
        LongTailSpec {
            n_classes: self.n_classes,
            imbalance_ratio: self.imbalance_ratio,
            exponent: self.exponent,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.long_tail().validate()?;
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(SimError::InvalidSpec("canvas must have positive size".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(SimError::InvalidSpec(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(SimError::InvalidSpec(format!(
                "negative_fraction must lie in [0, 1], got {}",
                self.negative_fraction
            )));
        }
        if !(self.min_object_side > 0.0 && self.max_side_fraction > 0.0) {
            return Err(SimError::InvalidSpec("object size range must be positive".into()));
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 100;

fn place_object<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<BBox, SimError> {
    let lo = spec.min_object_side.ln();
    let hi = (spec.max_side_fraction * spec.width.min(spec.height)).ln();
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let aspect_span = 2f64.ln();
    for _ in 0..PLACEMENT_RETRIES {
        let side = rng.random_range(lo..=hi).exp();
        let aspect = rng.random_range(-aspect_span..=aspect_span).exp().sqrt();
        let (w, h) = (side * aspect, side / aspect);
        if w > spec.width || h > spec.height {
            continue;
        }
        let x1 = rng.random_range(0.0..=spec.width - w);
        let y1 = rng.random_range(0.0..=spec.height - h);
        // keep the far corner on the canvas despite rounding
        return Ok(BBox::new(x1, y1, (x1 + w).min(spec.width), (y1 + h).min(spec.height))?);
    }
    Err(SimError::Placement {
        width: spec.width,
        height: spec.height,
        retries: PLACEMENT_RETRIES,
    })
}

/// Builds a dataset as a pure function of `spec` and `seed`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset, SimError> {
    spec.validate()?;
    let probs = spec.long_tail().class_probabilities();
    let classes = WeightedIndex::new(&probs)
        .map_err(|e| SimError::InvalidSpec(format!("class weights: {e}")))?;

    let n_neg = (spec.n_scenes as f64 * spec.negative_fraction).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_scenes).collect();
    order.shuffle(&mut substream(seed, &[tag::NEGATIVES]));
    let mut negative = vec![false; spec.n_scenes];
    for &i in &order[..n_neg] {
        negative[i] = true;
    }

    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for (id, &is_negative) in negative.iter().enumerate() {
        let id = id as u64;
        let mut rng = substream(seed, &[tag::GENERATE, id]);
        let count = if is_negative {
            0
        } else {
            rng.random_range(spec.min_objects..=spec.max_objects)
        };
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let class_id = classes.sample(&mut rng) as u32;
            objects.push(SceneObject {
                bbox: place_object(spec, &mut rng)?,
                class_id,
                difficult: false,
            });
        }
        scenes.push(Scene {
            id,
            width: spec.width,
            height: spec.height,
            objects,
        });
    }
    Ok(Dataset { scenes })
}

/// Best-overlapping ground truth for `r`, if any overlaps at all.
pub fn best_match(r: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best = None;
    let mut best_iou = 0.0;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(r, g);
        if v > best_iou {
            best_iou = v;
            best = Some(j);
        }
    }
    best.map(|j| (j, best_iou))
}

/// Noise parameters of one oracle proposal stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Std-dev of additive objectness noise.
    pub score_sigma: f64,
    /// Fraction of the true offset recovered by regression.
    pub reg_shrink: f64,
    /// Std-dev of delta-space regression noise.
    pub reg_sigma: f64,
    /// Extra regression noise for small reference boxes; see [`NoiseModel::sigma_for`].
    pub small_object_sigma: f64,
    /// Reference side length (sqrt of area) above which no extra noise applies.
    pub small_object_side: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::stage1()
    }
}

impl NoiseModel {
    pub fn stage1() -> Self {
        Self {
            score_sigma: 0.1,
            reg_shrink: 0.6,
            reg_sigma: 0.2,
            small_object_sigma: 0.0,
            small_object_side: 64.0,
            seed: 0,
        }
    }

    /// Less noisy than stage 1 for medium and large boxes, noisier for small ones.
    pub fn stage2() -> Self {
        Self {
            score_sigma: 0.05,
            reg_shrink: 0.6,
            reg_sigma: 0.05,
            small_object_sigma: 0.8,
            ..Self::stage1()
        }
    }

    pub fn noiseless() -> Self {
        Self {
            score_sigma: 0.0,
            reg_shrink: 1.0,
            reg_sigma: 0.0,
            small_object_sigma: 0.0,
            small_object_side: 64.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.score_sigma) || !nonneg(self.reg_sigma) || !nonneg(self.small_object_sigma) {
            return Err(SimError::InvalidSpec("noise std-devs must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.reg_shrink) {
            return Err(SimError::InvalidSpec(format!(
                "reg_shrink must lie in [0, 1], got {}",
                self.reg_shrink
            )));
        }
        if !(self.small_object_side > 0.0) {
            return Err(SimError::InvalidSpec("small_object_side must be positive".into()));
        }
        Ok(())
    }

    /// Regression noise for a reference box: grows linearly as its side
    /// falls below `small_object_side`.
    pub fn sigma_for(&self, reference: &BBox) -> f64 {
        let side = reference.area().max(0.0).sqrt();
        let deficit = (1.0 - side / self.small_object_side).clamp(0.0, 1.0);
        self.reg_sigma + self.small_object_sigma * deficit
    }
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn noisy_delta<R: Rng>(rng: &mut R, base: RegressionDelta, sigma: f64) -> RegressionDelta {
    RegressionDelta::new(
        base.tx + gaussian(rng, sigma),
        base.ty + gaussian(rng, sigma),
        base.tw + gaussian(rng, sigma),
        base.th + gaussian(rng, sigma),
    )
}

/// Ground-truth-aware proposal scorer with configurable noise.
///
/// References without any overlapping object get no regression target, only
/// noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScorer {
    pub noise: NoiseModel,
}

impl OracleScorer {
    pub fn new(noise: NoiseModel) -> Result<Self, SimError> {
        noise.validate()?;
        Ok(Self { noise })
    }
}

impl Scorer for OracleScorer {
    fn score_and_regress(
        &self,
        refs: &[BBox],
        ctx: &ScoreContext<'_>,
    ) -> Result<Vec<ScoreOutput>, CascadeError> {
        let stage_tag = match ctx.stage {
            Stage::One => tag::STAGE1,
            Stage::Two => tag::STAGE2,
        };
        let mut rng = substream(self.noise.seed, &[stage_tag, ctx.scene.id, ctx.run]);
        let gts = ctx.scene.gt_boxes();
        refs.iter()
            .map(|r| {
                let matched = best_match(r, &gts);
                let overlap = matched.map_or(0.0, |(_, v)| v);
                let objectness = (overlap + gaussian(&mut rng, self.noise.score_sigma)).clamp(0.0, 1.0);
                let target = match matched {
                    Some((j, _)) => encode(&gts[j], r)?.scaled(self.noise.reg_shrink),
                    None => RegressionDelta::ZERO,
                };
                let delta = noisy_delta(&mut rng, target, self.noise.sigma_for(r));
                Ok(ScoreOutput { objectness, delta })
            })
            .collect()
    }
}

/// Noise parameters of the recognition-stage oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorNoise {
    /// Std-dev of the foreground-evidence noise.
    pub fg_sigma: f64,
    /// Std-dev of per-class logit noise.
    pub class_sigma: f64,
    /// Logit bonus of the true class.
    pub class_margin: f64,
    /// Pair classes `2k` and `2k + 1` as mutually confusable.
    pub confusable_pairs: bool,
    /// The partner class gets `class_margin * U(confusion_min, confusion_max)`.
    pub confusion_min: f64,
    pub confusion_max: f64,
    /// Minimum IoU for a proposal to carry class evidence.
    pub min_overlap: f64,
    pub reg_shrink: f64,
    pub reg_sigma: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            fg_sigma: 0.1,
            class_sigma: 0.5,
            class_margin: 3.0,
            confusable_pairs: true,
            confusion_min: 0.6,
            confusion_max: 1.1,
            min_overlap: 0.3,
            reg_shrink: 0.7,
            reg_sigma: 0.06,
        }
    }
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<(), SimError> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(nonneg(self.fg_sigma) && nonneg(self.class_sigma) && nonneg(self.reg_sigma) && nonneg(self.class_margin)) {
            return Err(SimError::InvalidSpec("detector noise parameters must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.reg_shrink) {
            return Err(SimError::InvalidSpec("detector reg_shrink must lie in [0, 1]".into()));
        }
        if !(nonneg(self.confusion_min) && self.confusion_min <= self.confusion_max && self.confusion_max.is_finite()) {
            return Err(SimError::InvalidSpec("confusion range must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Confusable partner of `class_id`, if pairing is enabled and it exists.
pub fn confusable_partner(class_id: u32, n_classes: u32) -> Option<u32> {
    let p = class_id ^ 1;
    (p < n_classes).then_some(p)
}

/// Recognition-stage oracle: class scores and refined boxes per proposal.
///
/// Scores have `n_classes + 1` entries with background at index 0; class `c`
/// lives at index `c + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorOracle {
    pub noise: DetectorNoise,
    pub n_classes: u32,
    pub seed: u64,
}

impl DetectorOracle {
    pub fn new(noise: DetectorNoise, n_classes: u32, seed: u64) -> Result<Self, SimError> {
        noise.validate()?;
        if n_classes == 0 {
            return Err(SimError::InvalidSpec("detector needs at least one class".into()));
        }
        Ok(Self { noise, n_classes, seed })
    }

    /// Outputs for `proposals`, given in the coordinates of `scene`.
    pub fn predict(&self, scene: &Scene, proposals: &[BBox], run: u64) -> Result<Vec<FrcnOutput>, SimError> {
        let mut rng = substream(self.seed, &[tag::DETECTOR, scene.id, run]);
        let gts = scene.gt_boxes();
        let n = self.n_classes as usize;
        let nz = &self.noise;
        proposals
            .iter()
            .map(|p| {
                let matched = best_match(p, &gts);
                let overlap = matched.map_or(0.0, |(_, v)| v);
                let fg = (overlap + gaussian(&mut rng, nz.fg_sigma)).clamp(0.0, 1.0);

                let mut logits: Vec<f64> = (0..n).map(|_| gaussian(&mut rng, nz.class_sigma)).collect();
                let confusion = rng.random_range(nz.confusion_min..=nz.confusion_max);
                if let Some((j, v)) = matched {
                    if v >= nz.min_overlap {
                        let c = scene.objects[j].class_id;
                        logits[c as usize] += nz.class_margin;
                        if nz.confusable_pairs {
                            if let Some(partner) = confusable_partner(c, self.n_classes) {
                                logits[partner as usize] += nz.class_margin * confusion;
                            }
                        }
                    }
                }
                let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
                let z: f64 = exp.iter().sum();
                let mut class_scores = Vec::with_capacity(n + 1);
                class_scores.push(1.0 - fg);
                class_scores.extend(exp.iter().map(|e| fg * e / z));

                // clipped proposals can be degenerate; regress from a 1 px box
                let reference = p.with_min_extent(1.0);
                let target = match matched {
                    Some((j, _)) => encode(&gts[j], &reference)?.scaled(nz.reg_shrink),
                    None => RegressionDelta::ZERO,
                };
                let delta = noisy_delta(&mut rng, target, nz.reg_sigma);
                let refined = clip_to(&decode(&delta, &reference)?, scene.width, scene.height);
                Ok(FrcnOutput {
                    class_scores,
                    bbox: refined,
                })
            })
            .collect()
    }
}

/// Scene-level class evidence: `w_c = 1 + alpha` for classes present, else 1.
pub fn context_prior_for(scene: &Scene, n_classes: u32, alpha: f64) -> Result<ContextPrior, SimError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(SimError::InvalidSpec(format!("context alpha must be >= 0, got {alpha}")));
    }
    let mut weights = vec![1.0; n_classes as usize];
    for o in &scene.objects {
        if let Some(w) = weights.get_mut(o.class_id as usize) {
            *w = 1.0 + alpha;
        }
    }
    Ok(ContextPrior::new(weights)?)
}

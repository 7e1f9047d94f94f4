//! Training-phase selection: anchor labeling, constrained N/P batching,
//! class-aware balanced image sampling, negative-image batches and online
//! hard example mining.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{encode, iou, BBox, BoxError, RegressionDelta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("no positive and no negative anchors to sample")]
    EmptyBatch,
    #[error("invalid N/P configuration: {0}")]
    InvalidConfig(String),
    #[error("balanced sampler has no image containing any object")]
    EmptyDataset,
    #[error("negative-image batch requested for a scene with {0} objects")]
    SceneHasObjects(usize),
    #[error("OHEM got {got} losses but forwards at most {forward_n}")]
    TooManyLosses { got: usize, forward_n: usize },
    #[error(transparent)]
    Box(#[from] BoxError),
}

/// IoU thresholds used to label anchors against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            positive: 0.7,
            negative: 0.3,
        }
    }
}

/// Positive/negative anchor sets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabeling {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub max_iou: Vec<f64>,
    pub matched_gt: Vec<Option<usize>>,
}

impl AnchorLabeling {
    pub fn np_ratio(&self) -> f64 {
        self.negatives.len() as f64 / self.positives.len().max(1) as f64
    }
}

/// Labels anchors: IoU >= `positive` or best anchor for some ground truth
/// is positive; IoU < `negative` (and not positive) is negative; the rest
/// are ignored.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], thr: LabelThresholds) -> AnchorLabeling {
    let n = anchors.len();
    let mut max_iou = vec![0.0; n];
    let mut matched_gt = vec![None; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > max_iou[i] {
                max_iou[i] = v;
                matched_gt[i] = Some(j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut is_pos = vec![false; n];
    for (i, a) in anchors.iter().enumerate() {
        if max_iou[i] >= thr.positive {
            is_pos[i] = true;
            continue;
        }
        // per-GT argmax anchors, ties included
        for (j, g) in gts.iter().enumerate() {
            if gt_best[j] > 0.0 && iou(a, g) == gt_best[j] {
                is_pos[i] = true;
                matched_gt[i] = Some(j);
                break;
            }
        }
    }
    let positives = (0..n).filter(|&i| is_pos[i]).collect();
    let negatives = (0..n)
        .filter(|&i| !is_pos[i] && max_iou[i] < thr.negative)
        .collect();
    AnchorLabeling {
        positives,
        negatives,
        max_iou,
        matched_gt,
    }
}

/// Constrained N/P sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpConfig {
    pub batch_size: usize,
    pub max_np_ratio: f64,
    pub min_batch_size: usize,
}

impl Default for NpConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_np_ratio: 1.5,
            min_batch_size: 32,
        }
    }
}

impl NpConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.min_batch_size > self.batch_size {
            return Err(SamplingError::InvalidConfig(format!(
                "min_batch_size {} exceeds batch_size {}",
                self.min_batch_size, self.batch_size
            )));
        }
        if !(self.max_np_ratio > 0.0 && self.max_np_ratio.is_finite()) {
            return Err(SamplingError::InvalidConfig(format!(
                "max_np_ratio must be positive, got {}",
                self.max_np_ratio
            )));
        }
        Ok(())
    }

    /// Batch composition `(positives, negatives)` for the given availability.
    pub fn counts(&self, n_pos: usize, n_neg: usize) -> (usize, usize) {
        let pos = n_pos.min(self.batch_size / 2);
        let by_ratio = (pos as f64 * self.max_np_ratio).floor() as usize;
        let neg = by_ratio
            .max(self.min_batch_size.saturating_sub(pos))
            .min(n_neg)
            .min(self.batch_size - pos);
        (pos, neg)
    }
}

/// How anchor batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchPolicy {
    /// Up to half positives, filled to `batch_size` with negatives.
    Standard { batch_size: usize },
    Constrained(NpConfig),
}

impl BatchPolicy {
    pub fn counts(&self, n_pos: usize, n_neg: usize) -> (usize, usize) {
        match *self {
            BatchPolicy::Standard { batch_size } => {
                let pos = n_pos.min(batch_size / 2);
                (pos, n_neg.min(batch_size - pos))
            }
            BatchPolicy::Constrained(cfg) => cfg.counts(n_pos, n_neg),
        }
    }
}

/// Sampled anchor indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorBatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl AnchorBatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, from: &[usize], k: usize) -> Vec<usize> {
    index::sample(rng, from.len(), k)
        .into_iter()
        .map(|i| from[i])
        .collect()
}

/// Draws a batch uniformly without replacement under `policy`.
pub fn sample_batch<R: Rng + ?Sized>(
    labeling: &AnchorLabeling,
    policy: BatchPolicy,
    rng: &mut R,
) -> Result<AnchorBatch, SamplingError> {
    if labeling.positives.is_empty() && labeling.negatives.is_empty() {
        return Err(SamplingError::EmptyBatch);
    }
    let (n_pos, n_neg) = policy.counts(labeling.positives.len(), labeling.negatives.len());
    Ok(AnchorBatch {
        positives: pick(rng, &labeling.positives, n_pos),
        negatives: pick(rng, &labeling.negatives, n_neg),
    })
}

/// Batch with at most `max_np_ratio` negatives per positive, shrunk when
/// positives are scarce but never below `min_batch_size` while negatives last.
pub fn constrained_np_sample<R: Rng + ?Sized>(
    labeling: &AnchorLabeling,
    cfg: &NpConfig,
    rng: &mut R,
) -> Result<AnchorBatch, SamplingError> {
    cfg.validate()?;
    sample_batch(labeling, BatchPolicy::Constrained(*cfg), rng)
}

/// Class-aware sampler: draw a class uniformly, then an image of that class.
#[derive(Debug, Clone)]
pub struct SamplerState {
    classes: Vec<(u32, Vec<usize>)>,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// `image_classes[i]` lists the class ids of the objects in image `i`.
    pub fn new(image_classes: &[Vec<u32>], seed: u64) -> Result<Self, SamplingError> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (img, classes) in image_classes.iter().enumerate() {
            for &c in classes {
                let list = by_class.entry(c).or_default();
                if list.last() != Some(&img) {
                    list.push(img);
                }
            }
        }
        if by_class.is_empty() {
            return Err(SamplingError::EmptyDataset);
        }
        Ok(Self {
            classes: by_class.into_iter().collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn images_of(&self, class_id: u32) -> Option<&[usize]> {
        self.classes
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, v)| v.as_slice())
    }

    /// Next image index.
    pub fn balanced_next(&mut self) -> usize {
        let c = self.rng.random_range(0..self.classes.len());
        let images = &self.classes[c].1;
        images[self.rng.random_range(0..images.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsRow {
    pub anchor: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegRow {
    pub anchor: usize,
    pub target: RegressionDelta,
}

/// One image's training rows: classification for every sampled anchor,
/// regression for positives only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub cls_rows: Vec<ClsRow>,
    pub reg_rows: Vec<RegRow>,
}

impl TrainingBatch {
    pub fn num_positive(&self) -> usize {
        self.cls_rows.iter().filter(|r| r.positive).count()
    }

    pub fn num_negative(&self) -> usize {
        self.cls_rows.len() - self.num_positive()
    }
}

/// Training rows for an image with objects.
pub fn image_batch<R: Rng + ?Sized>(
    anchors: &[BBox],
    gts: &[BBox],
    labeling: &AnchorLabeling,
    policy: BatchPolicy,
    rng: &mut R,
) -> Result<TrainingBatch, SamplingError> {
    let batch = sample_batch(labeling, policy, rng)?;
    let mut out = TrainingBatch::default();
    for &a in &batch.positives {
        out.cls_rows.push(ClsRow {
            anchor: a,
            positive: true,
        });
        if let Some(g) = labeling.matched_gt[a] {
            out.reg_rows.push(RegRow {
                anchor: a,
                target: encode(&gts[g], &anchors[a])?,
            });
        }
    }
    out.cls_rows.extend(batch.negatives.iter().map(|&a| ClsRow {
        anchor: a,
        positive: false,
    }));
    Ok(out)
}

/// Background-only rows for an image without objects; no regression targets.
pub fn negative_image_batch<R: Rng + ?Sized>(
    gts: &[BBox],
    num_anchors: usize,
    policy: BatchPolicy,
    rng: &mut R,
) -> Result<TrainingBatch, SamplingError> {
    if !gts.is_empty() {
        return Err(SamplingError::SceneHasObjects(gts.len()));
    }
    let (_, n_neg) = policy.counts(0, num_anchors);
    if n_neg == 0 {
        return Err(SamplingError::EmptyBatch);
    }
    let cls_rows = index::sample(rng, num_anchors, n_neg)
        .into_iter()
        .map(|anchor| ClsRow {
            anchor,
            positive: false,
        })
        .collect();
    Ok(TrainingBatch {
        cls_rows,
        reg_rows: Vec::new(),
    })
}

pub const OHEM_FORWARD: usize = 300;
pub const OHEM_BACKWARD: usize = 64;

/// Indices of the `backward_k` largest losses, in descending loss order with
/// ties broken by lower index.
pub fn ohem_select(
    losses: &[f64],
    forward_n: usize,
    backward_k: usize,
) -> Result<Vec<usize>, SamplingError> {
    if losses.len() > forward_n {
        return Err(SamplingError::TooManyLosses {
            got: losses.len(),
            forward_n,
        });
    }
    let harder = |a: &usize, b: &usize| losses[*b].total_cmp(&losses[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    let k = backward_k.min(idx.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, harder);
        idx.truncate(k);
    }
    idx.sort_unstable_by(harder);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeling(n_pos: usize, n_neg: usize) -> AnchorLabeling {
        let n = n_pos + n_neg;
        AnchorLabeling {
            positives: (0..n_pos).collect(),
            negatives: (n_pos..n).collect(),
            max_iou: vec![0.0; n],
            matched_gt: vec![None; n],
        }
    }

    #[test]
    fn constrained_examples() {
        let cfg = NpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = constrained_np_sample(&labeling(20, 500), &cfg, &mut rng).unwrap();
        assert_eq!((b.positives.len(), b.negatives.len()), (20, 30));
        let b = constrained_np_sample(&labeling(5, 500), &cfg, &mut rng).unwrap();
        assert_eq!((b.positives.len(), b.negatives.len()), (5, 27));
        let b = constrained_np_sample(&labeling(0, 500), &cfg, &mut rng).unwrap();
        assert_eq!((b.positives.len(), b.negatives.len()), (0, 32));
        assert_eq!(
            constrained_np_sample(&labeling(0, 0), &cfg, &mut rng),
            Err(SamplingError::EmptyBatch)
        );
    }

    #[test]
    fn constrained_caps_and_availability() {
        let cfg = NpConfig::default();
        assert_eq!(cfg.counts(300, 1000), (128, 128));
        assert_eq!(cfg.counts(60, 1000), (60, 90));
        assert_eq!(cfg.counts(5, 10), (5, 10));
        let standard = BatchPolicy::Standard { batch_size: 256 };
        assert_eq!(standard.counts(20, 500), (20, 236));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = NpConfig {
            min_batch_size: 300,
            ..NpConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NpConfig {
            max_np_ratio: 0.0,
            ..NpConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampled_indices_are_unique_and_deterministic() {
        let l = labeling(40, 900);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&l, BatchPolicy::Standard { batch_size: 256 }, &mut rng).unwrap()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        let mut all: Vec<_> = a.positives.iter().chain(&a.negatives).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 256);
        assert!(a.positives.iter().all(|&i| i < 40));
        assert!(a.negatives.iter().all(|&i| i >= 40));
    }

    #[test]
    fn labeling_marks_argmax_positive() {
        let gts = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let anchors = [
            BBox::new(0.0, 0.0, 20.0, 20.0).unwrap(),  // iou .25, argmax
            BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(), // 0
            BBox::new(5.0, 0.0, 25.0, 20.0).unwrap(),  // .125
        ];
        let l = label_anchors(&anchors, &gts, LabelThresholds::default());
        assert_eq!(l.positives, vec![0]);
        assert_eq!(l.negatives, vec![1, 2]);
        assert_eq!(l.matched_gt[0], Some(0));
    }

    #[test]
    fn balanced_single_option() {
        let mut s = SamplerState::new(&[vec![0]], 3).unwrap();
        for _ in 0..10 {
            assert_eq!(s.balanced_next(), 0);
        }
        assert_eq!(
            SamplerState::new(&[vec![], vec![]], 0).unwrap_err(),
            SamplingError::EmptyDataset
        );
    }

    #[test]
    fn balanced_two_classes() {
        // 100 images of class A, one image of class B
        let mut images: Vec<Vec<u32>> = vec![vec![0]; 100];
        images.push(vec![1]);
        let mut s = SamplerState::new(&images, 42).unwrap();
        let hits = (0..10_000).filter(|_| s.balanced_next() == 100).count();
        let f = hits as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }

    #[test]
    fn negative_batch_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = BatchPolicy::Constrained(NpConfig::default());
        let b = negative_image_batch(&[], 1000, policy, &mut rng).unwrap();
        assert_eq!(b.cls_rows.len(), 32);
        assert!(b.reg_rows.is_empty());
        assert!(b.cls_rows.iter().all(|r| !r.positive));

        let gt = [BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()];
        assert_eq!(
            negative_image_batch(&gt, 1000, policy, &mut rng),
            Err(SamplingError::SceneHasObjects(1))
        );

        // hardest-k still applies to the classification rows
        let losses: Vec<f64> = b.cls_rows.iter().map(|r| r.anchor as f64).collect();
        let hard = ohem_select(&losses, OHEM_FORWARD, 8).unwrap();
        assert_eq!(hard.len(), 8);
        let min_kept = hard.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
        assert_eq!(losses.iter().filter(|&&l| l >= min_kept).count(), 8);
    }

    #[test]
    fn image_batch_regresses_positives_only() {
        let gts = [BBox::new(0.0, 0.0, 32.0, 32.0).unwrap()];
        let anchors: Vec<BBox> = (0..20)
            .map(|i| BBox::from_center(16.0 + 8.0 * i as f64, 16.0, 32.0, 32.0).unwrap())
            .collect();
        let l = label_anchors(&anchors, &gts, LabelThresholds::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = image_batch(&anchors, &gts, &l, BatchPolicy::Constrained(NpConfig::default()), &mut rng)
            .unwrap();
        assert_eq!(b.reg_rows.len(), b.num_positive());
        assert!(b.num_positive() > 0);
    }

    #[test]
    fn ohem_examples() {
        assert_eq!(ohem_select(&[0.1, 0.9, 0.5], 300, 2).unwrap(), vec![1, 2]);
        assert_eq!(ohem_select(&[0.1, 0.9, 0.5], 300, 10).unwrap(), vec![1, 2, 0]);
        assert_eq!(ohem_select(&[0.5, 0.5, 0.5], 300, 2).unwrap(), vec![0, 1]);
        assert!(ohem_select(&[0.0; 301], 300, 64).is_err());
        assert!(ohem_select(&[], 300, 64).unwrap().is_empty());
    }

    fn naive_top_k(losses: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..losses.len()).collect();
        idx.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn ohem_exhaustive_small() {
        // every loss vector over a 3-level alphabet for n <= 7
        for n in 0..=7usize {
            for code in 0..3usize.pow(n as u32) {
                let losses: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
                for k in 0..=n + 1 {
                    assert_eq!(ohem_select(&losses, 300, k).unwrap(), naive_top_k(&losses, k));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ohem_matches_sort(losses in prop::collection::vec(0.0..5.0f64, 300)) {
            prop_assert_eq!(ohem_select(&losses, 300, 64).unwrap(), naive_top_k(&losses, 64));
        }

        #[test]
        fn ratio_respected_when_positives_suffice(
            n_pos in 0usize..400, n_neg in 0usize..3000, seed in any::<u64>()
        ) {
            let cfg = NpConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match constrained_np_sample(&labeling(n_pos, n_neg), &cfg, &mut rng) {
                Ok(b) => {
                    let (p, q) = (b.positives.len(), b.negatives.len());
                    prop_assert_eq!(p, n_pos.min(128));
                    prop_assert!(p + q <= cfg.batch_size);
                    let floor = cfg.min_batch_size as f64 / (1.0 + cfg.max_np_ratio);
                    if p as f64 >= floor {
                        prop_assert!(q as f64 <= cfg.max_np_ratio * p as f64);
                    } else {
                        prop_assert!(p + q >= cfg.min_batch_size.min(p + n_neg));
                    }
                }
                Err(e) => prop_assert!(n_pos == 0 && n_neg == 0 && e == SamplingError::EmptyBatch),
            }
        }
    }
}

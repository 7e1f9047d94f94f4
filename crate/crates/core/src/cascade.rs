//! Two-stage cascade proposal pipeline.
//!
//! Stage 1 scores and regresses the sliding-window anchors. Stage 2 takes the
//! regressed stage-1 boxes, unsorted and unsuppressed, as its reference boxes,
//! so proposal `i` of either stage always descends from anchor `i`. Sorting,
//! NMS and truncation happen only once, after both stages are fused.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{clip_to, decode, Anchor, BBox, BoxError, RegressionDelta, ScoredBox};
use crate::postprocess::nms_top_n;
use crate::simgen::Scene;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("no anchors to score")]
    NoAnchors,
    #[error("broken one-to-one correspondence: {left} vs {right} entries")]
    Correspondence { left: usize, right: usize },
    #[error("scorer returned {got} outputs for {expected} reference boxes")]
    ScorerLength { expected: usize, got: usize },
    #[error("size threshold must be non-negative, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Box(#[from] BoxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    One,
    Two,
}

/// What a scorer may look at besides the reference boxes.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub scene: &'a Scene,
    /// Distinguishes test-time runs (scale, flip) of the same scene.
    pub run: u64,
    pub stage: Stage,
    /// Anchor template index of each reference box, aligned with it.
    pub templates: &'a [u32],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOutput {
    pub objectness: f64,
    pub delta: RegressionDelta,
}

/// Per-box objectness and regression; the stand-in for an RPN head.
///
/// Implementations must return exactly one output per reference box and be
/// callable from several threads at once.
pub trait Scorer: Send + Sync {
    fn score_and_regress(
        &self,
        refs: &[BBox],
        ctx: &ScoreContext<'_>,
    ) -> Result<Vec<ScoreOutput>, CascadeError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub parent_anchor: usize,
    pub stage: Stage,
}

fn run_stage(
    refs: &[BBox],
    templates: &[u32],
    scorer: &dyn Scorer,
    scene: &Scene,
    run: u64,
    stage: Stage,
) -> Result<Vec<Proposal>, CascadeError> {
    let ctx = ScoreContext {
        scene,
        run,
        stage,
        templates,
    };
    let outputs = scorer.score_and_regress(refs, &ctx)?;
    if outputs.len() != refs.len() {
        return Err(CascadeError::ScorerLength {
            expected: refs.len(),
            got: outputs.len(),
        });
    }
    refs.iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (r, out))| {
            let bbox = clip_to(&decode(&out.delta, r)?, scene.width, scene.height);
            Ok(Proposal {
                bbox,
                objectness: out.objectness.clamp(0.0, 1.0),
                parent_anchor: i,
                stage,
            })
        })
        .collect()
}

fn templates_of(anchors: &[Anchor]) -> Vec<u32> {
    anchors.iter().map(|a| a.template_index).collect()
}

/// Scores and regresses every anchor. No sorting, NMS or truncation.
pub fn stage1(
    anchors: &[Anchor],
    scorer: &dyn Scorer,
    scene: &Scene,
    run: u64,
) -> Result<Vec<Proposal>, CascadeError> {
    if anchors.is_empty() {
        return Err(CascadeError::NoAnchors);
    }
    let refs: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
    run_stage(&refs, &templates_of(anchors), scorer, scene, run, Stage::One)
}

/// Re-scores and re-regresses stage-1 proposals, using each one as the
/// reference box of its own anchor.
///
/// During training the anchor fixes the feature-map position while the
/// stage-1 proposal defines the classification and regression targets; at
/// inference only the reference boxes matter. Zero-area references are widened
/// to one pixel.
pub fn stage2(
    stage1_proposals: &[Proposal],
    anchors: &[Anchor],
    scorer: &dyn Scorer,
    scene: &Scene,
    run: u64,
) -> Result<Vec<Proposal>, CascadeError> {
    if stage1_proposals.len() != anchors.len() {
        return Err(CascadeError::Correspondence {
            left: stage1_proposals.len(),
            right: anchors.len(),
        });
    }
    let refs: Vec<BBox> = stage1_proposals
        .iter()
        .map(|p| p.bbox.with_min_extent(1.0))
        .collect();
    let mut out = run_stage(&refs, &templates_of(anchors), scorer, scene, run, Stage::Two)?;
    for (o, p) in out.iter_mut().zip(stage1_proposals) {
        o.parent_anchor = p.parent_anchor;
    }
    Ok(out)
}

/// Which box decides whether an index is "small".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeKey {
    #[default]
    Stage1,
    Stage2,
}

/// Stage-1 proposals for small boxes, stage-2 proposals for the rest.
pub fn fuse_by_size(
    s1: &[Proposal],
    s2: &[Proposal],
    threshold_area: f64,
    key: SizeKey,
) -> Result<Vec<Proposal>, CascadeError> {
    if s1.len() != s2.len() {
        return Err(CascadeError::Correspondence {
            left: s1.len(),
            right: s2.len(),
        });
    }
    if !(threshold_area >= 0.0) {
        return Err(CascadeError::InvalidThreshold(threshold_area));
    }
    Ok(s1
        .iter()
        .zip(s2)
        .map(|(a, b)| {
            let area = match key {
                SizeKey::Stage1 => a.bbox.area(),
                SizeKey::Stage2 => b.bbox.area(),
            };
            if area < threshold_area {
                *a
            } else {
                *b
            }
        })
        .collect())
}

/// Sort by objectness, suppress at `nms_iou`, keep at most `top_n`.
pub fn finalize_proposals(proposals: &[Proposal], nms_iou: f64, top_n: usize) -> Vec<ScoredBox> {
    let scored: Vec<ScoredBox> = proposals
        .iter()
        .map(|p| ScoredBox::new(p.bbox, p.objectness).expect("objectness is clamped to [0, 1]"))
        .collect();
    nms_top_n(&scored, nms_iou, top_n)
}

/// Which proposals a cascade run emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    /// Stage 1 only; stage 2 never runs.
    Stage1,
    Stage2,
    #[default]
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub size_threshold_area: f64,
    pub size_key: SizeKey,
    pub nms_iou: f64,
    pub top_n: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            size_threshold_area: 64.0 * 64.0,
            size_key: SizeKey::Stage1,
            nms_iou: 0.7,
            top_n: 300,
        }
    }
}

/// Scorers plus configuration for one proposal pipeline.
pub struct Cascade<'a> {
    pub stage1: &'a dyn Scorer,
    pub stage2: &'a dyn Scorer,
    pub source: ProposalSource,
    pub config: CascadeConfig,
}

impl Cascade<'_> {
    /// Raw (pre-NMS) proposals, index-aligned with `anchors`.
    pub fn raw_proposals(&self, anchors: &[Anchor], scene: &Scene, run: u64) -> Result<Vec<Proposal>, CascadeError> {
        let s1 = stage1(anchors, self.stage1, scene, run)?;
        if self.source == ProposalSource::Stage1 {
            return Ok(s1);
        }
        let s2 = stage2(&s1, anchors, self.stage2, scene, run)?;
        match self.source {
            ProposalSource::Stage2 => Ok(s2),
            _ => fuse_by_size(&s1, &s2, self.config.size_threshold_area, self.config.size_key),
        }
    }

    pub fn propose(&self, anchors: &[Anchor], scene: &Scene, run: u64) -> Result<Vec<ScoredBox>, CascadeError> {
        let raw = self.raw_proposals(anchors, scene, run)?;
        Ok(finalize_proposals(&raw, self.config.nms_iou, self.config.top_n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{generate_anchors, iou, DEFAULT_ANCHOR_RATIOS, DEFAULT_ANCHOR_SCALES};
    use crate::postprocess::reference_nms;
    use crate::simgen::{NoiseModel, OracleScorer, SceneObject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Identity;

    impl Scorer for Identity {
        fn score_and_regress(&self, refs: &[BBox], _: &ScoreContext<'_>) -> Result<Vec<ScoreOutput>, CascadeError> {
            Ok(vec![
                ScoreOutput {
                    objectness: 0.5,
                    delta: RegressionDelta::ZERO
                };
                refs.len()
            ])
        }
    }

    struct Short;

    impl Scorer for Short {
        fn score_and_regress(&self, refs: &[BBox], _: &ScoreContext<'_>) -> Result<Vec<ScoreOutput>, CascadeError> {
            Ok(Identity.score_and_regress(refs, &dummy_ctx())?[1..].to_vec())
        }
    }

    fn dummy_ctx() -> ScoreContext<'static> {
        static SCENE: Scene = Scene {
            id: 0,
            width: 1.0,
            height: 1.0,
            objects: Vec::new(),
        };
        ScoreContext {
            scene: &SCENE,
            run: 0,
            stage: Stage::One,
            templates: &[],
        }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn scene(objects: &[BBox]) -> Scene {
        Scene {
            id: 1,
            width: 256.0,
            height: 192.0,
            objects: objects
                .iter()
                .map(|&bbox| SceneObject {
                    bbox,
                    class_id: 0,
                    difficult: false,
                })
                .collect(),
        }
    }

    fn prop(b: BBox, score: f64, stage: Stage, i: usize) -> Proposal {
        Proposal {
            bbox: b,
            objectness: score,
            parent_anchor: i,
            stage,
        }
    }

    #[test]
    fn identity_stage1_returns_anchors() {
        let s = scene(&[]);
        let anchors = generate_anchors(64, 64, 16, &DEFAULT_ANCHOR_SCALES, &DEFAULT_ANCHOR_RATIOS).unwrap();
        let s = Scene { width: 64.0, height: 64.0, ..s };
        let props = stage1(&anchors, &Identity, &s, 0).unwrap();
        assert_eq!(props.len(), 288);
        for (i, (p, a)) in props.iter().zip(&anchors).enumerate() {
            let want = clip_to(&a.bbox, 64.0, 64.0);
            for (x, y) in p.bbox.coords().iter().zip(want.coords()) {
                assert!((x - y).abs() < 1e-9);
            }
            assert_eq!((p.parent_anchor, p.stage, p.objectness), (i, Stage::One, 0.5));
        }
        assert_eq!(stage1(&[], &Identity, &s, 0), Err(CascadeError::NoAnchors));
    }

    #[test]
    fn identity_stage2_keeps_boxes() {
        let s = scene(&[]);
        let anchors = generate_anchors(256, 192, 32, &[48.0], &[1.0]).unwrap();
        let s1 = stage1(&anchors, &Identity, &s, 0).unwrap();
        let s2 = stage2(&s1, &anchors, &Identity, &s, 0).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(b.stage, Stage::Two);
            assert_eq!(a.parent_anchor, b.parent_anchor);
        }
        assert_eq!(
            stage2(&s1[..s1.len() - 1], &anchors, &Identity, &s, 0),
            Err(CascadeError::Correspondence {
                left: s1.len() - 1,
                right: s1.len()
            })
        );
    }

    #[test]
    fn scorer_length_is_checked() {
        let s = scene(&[]);
        let anchors = generate_anchors(64, 64, 32, &[32.0], &[1.0]).unwrap();
        assert!(matches!(
            stage1(&anchors, &Short, &s, 0),
            Err(CascadeError::ScorerLength { .. })
        ));
    }

    #[test]
    fn stage2_widens_degenerate_references() {
        let s = scene(&[]);
        let anchors = generate_anchors(32, 32, 32, &[32.0], &[1.0]).unwrap();
        let flat = vec![prop(bx(5.0, 5.0, 5.0, 9.0), 0.3, Stage::One, 0)];
        let out = stage2(&flat, &anchors, &Identity, &s, 0).unwrap();
        assert!((out[0].bbox.width() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_stage2_never_worse() {
        let gts = [bx(30.0, 40.0, 110.0, 120.0), bx(150.0, 20.0, 230.0, 170.0)];
        let s = scene(&gts);
        let anchors = generate_anchors(256, 192, 16, &[64.0, 128.0], &[0.5, 1.0, 2.0]).unwrap();
        let noisy = OracleScorer::new(NoiseModel::stage1().with_seed(3)).unwrap();
        let perfect = OracleScorer::new(NoiseModel::noiseless()).unwrap();
        let s1 = stage1(&anchors, &noisy, &s, 0).unwrap();
        let s2 = stage2(&s1, &anchors, &perfect, &s, 0).unwrap();
        let best = |b: &BBox| gts.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
        for (a, b) in s1.iter().zip(&s2) {
            assert!(best(&b.bbox) + 1e-9 >= best(&a.bbox));
        }
    }

    #[test]
    fn fuse_examples() {
        let small = prop(bx(0.0, 0.0, 50.0, 50.0), 0.4, Stage::One, 0);
        let big = prop(bx(0.0, 0.0, 80.0, 80.0), 0.4, Stage::One, 1);
        let r_small = prop(bx(1.0, 1.0, 52.0, 52.0), 0.9, Stage::Two, 0);
        let r_big = prop(bx(1.0, 1.0, 82.0, 82.0), 0.9, Stage::Two, 1);
        let fused = fuse_by_size(&[small, big], &[r_small, r_big], 4096.0, SizeKey::Stage1).unwrap();
        assert_eq!(fused, vec![small, r_big]);
        let all2 = fuse_by_size(&[small, big], &[r_small, r_big], 0.0, SizeKey::Stage1).unwrap();
        assert_eq!(all2, vec![r_small, r_big]);
        assert!(fuse_by_size(&[small], &[r_small, r_big], 4096.0, SizeKey::Stage1).is_err());
        assert!(fuse_by_size(&[small], &[r_small], -1.0, SizeKey::Stage1).is_err());
        // keyed on stage 2: 51^2 = 2601 stays small
        let by2 = fuse_by_size(&[small], &[r_small], 2602.0, SizeKey::Stage2).unwrap();
        assert_eq!(by2, vec![small]);
    }

    #[test]
    fn finalize_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let props: Vec<Proposal> = (0..10)
            .map(|i| prop(bx(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0), 0.1 * i as f64 / 2.0, Stage::One, i))
            .collect();
        assert_eq!(finalize_proposals(&props, 0.7, 300).len(), 10);
        let dup = [prop(a, 0.9, Stage::One, 0), prop(a, 0.8, Stage::Two, 1)];
        let out = finalize_proposals(&dup, 0.7, 300);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score(), 0.9);
    }

    #[test]
    fn finalize_matches_reference_nms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let props: Vec<Proposal> = (0..500)
            .map(|i| {
                let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                let (w, h) = (rng.random_range(5.0..60.0), rng.random_range(5.0..60.0));
                prop(bx(x, y, x + w, y + h), rng.random_range(0.0..1.0), Stage::One, i)
            })
            .collect();
        let scored: Vec<ScoredBox> = props.iter().map(|p| ScoredBox::new(p.bbox, p.objectness).unwrap()).collect();
        let mut expect = reference_nms(&scored, 0.7);
        expect.truncate(300);
        assert_eq!(finalize_proposals(&props, 0.7, 300), expect);
    }

    #[test]
    fn noiseless_cascade_recovers_reachable_objects() {
        let gts = [bx(30.0, 40.0, 110.0, 120.0), bx(150.0, 20.0, 230.0, 170.0), bx(10.0, 150.0, 40.0, 180.0)];
        let s = scene(&gts);
        let anchors = generate_anchors(256, 192, 16, &DEFAULT_ANCHOR_SCALES, &DEFAULT_ANCHOR_RATIOS).unwrap();
        let oracle = OracleScorer::new(NoiseModel::noiseless()).unwrap();
        let cascade = Cascade {
            stage1: &oracle,
            stage2: &oracle,
            source: ProposalSource::Fused,
            config: CascadeConfig::default(),
        };
        let out = cascade.propose(&anchors, &s, 0).unwrap();
        for g in &gts {
            let reachable = anchors.iter().any(|a| iou(&a.bbox, g) >= 0.3);
            if reachable {
                assert!(out.iter().any(|p| iou(&p.bbox, g) >= 0.99), "{g:?}");
            }
        }
    }
}

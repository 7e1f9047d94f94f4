//! End-to-end evaluation of one configuration on one dataset.

use log::info;
use rayon::prelude::*;

use crate::boxes::{clip_to, flip_h, generate_anchors, rescale, BBox, ScoredBox};
use crate::cascade::{Cascade, Scorer};
use crate::eval::{ar_thresholds, mean_ap, Detection, EvalReport, GroundTruth, IouKey, RecallCounter};
use crate::objectness::{train_head, BatchStat, LearnedScorer, TrainConfig};
use crate::postprocess::{
    apply_context_prior, box_vote, merge_frcn, merge_rpn, nms_indices, normalize_scores, ContextPrior,
};
use crate::sampling::{BatchPolicy, LabelThresholds};
use crate::simgen::{context_prior_for, render_at_scale, Dataset, DetectorOracle, OracleScorer, Scene};

use super::config::{ExperimentConfig, ObjectnessSource};
use super::HarnessError;

/// One test-time rendering of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
struct View {
    short_side: Option<u32>,
    flip: bool,
}

fn views(scales: &[u32], flip: bool) -> Vec<View> {
    let sides: Vec<Option<u32>> = if scales.is_empty() {
        vec![None]
    } else {
        scales.iter().copied().map(Some).collect()
    };
    let flips: &[bool] = if flip { &[false, true] } else { &[false] };
    sides
        .iter()
        .flat_map(|&short_side| flips.iter().map(move |&flip| View { short_side, flip }))
        .collect()
}

/// A scene as seen by one view, with the mapping back to the original.
struct Rendered<'a> {
    original: &'a Scene,
    scene: Scene,
    factor: f64,
    flip: bool,
}

impl<'a> Rendered<'a> {
    fn new(original: &'a Scene, view: View) -> Result<Self, HarnessError> {
        let (scaled, factor) = match view.short_side {
            Some(s) => {
                let r = render_at_scale(original, f64::from(s))?;
                (r.scene, r.factor)
            }
            None => (original.clone(), 1.0),
        };
        let scene = if view.flip { scaled.flipped() } else { scaled };
        Ok(Self {
            original,
            scene,
            factor,
            flip: view.flip,
        })
    }

    fn to_view(&self, b: &BBox) -> Result<BBox, HarnessError> {
        let scaled = rescale(b, self.factor)?;
        Ok(if self.flip { flip_h(&scaled, self.scene.width) } else { scaled })
    }

    fn to_original(&self, b: &BBox) -> Result<BBox, HarnessError> {
        let unflipped = if self.flip { flip_h(b, self.scene.width) } else { *b };
        let back = rescale(&unflipped, 1.0 / self.factor)?;
        Ok(clip_to(&back, self.original.width, self.original.height))
    }
}

/// Scorers and settings built once per experiment.
pub struct Pipeline {
    cfg: ExperimentConfig,
    stage1: Box<dyn Scorer>,
    stage2: OracleScorer,
    detector: DetectorOracle,
    batch_stats: Option<Vec<BatchStat>>,
}

/// Everything one scene contributes to the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub proposals: Vec<ScoredBox>,
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

impl Pipeline {
    /// Trains the objectness head first when the configuration asks for one.
    pub fn build(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let base1 = OracleScorer::new(cfg.noise.stage1.with_seed(seed))?;
        let stage2 = OracleScorer::new(cfg.noise.stage2.with_seed(seed))?;
        let detector = DetectorOracle::new(cfg.noise.detector, cfg.dataset.n_classes, seed)?;
        let (stage1, batch_stats): (Box<dyn Scorer>, _) = match cfg.sampling.objectness {
            ObjectnessSource::Oracle => (Box::new(base1), None),
            ObjectnessSource::Learned => {
                let s = &cfg.sampling;
                let train = TrainConfig {
                    policy: if s.constrained {
                        BatchPolicy::Constrained(s.np())
                    } else {
                        BatchPolicy::Standard {
                            batch_size: s.batch_size,
                        }
                    },
                    thresholds: LabelThresholds {
                        positive: s.positive_iou,
                        negative: s.negative_iou,
                    },
                    balanced: s.balanced,
                    ohem: s.ohem,
                    negative_images: s.negative_images,
                    epochs: s.epochs,
                    learning_rate: s.learning_rate,
                    weight_decay: s.weight_decay,
                    scales: s.train_scales.clone(),
                    evidence_sigma: cfg.noise.stage1.score_sigma,
                    anchor_scales: cfg.anchors.scales.clone(),
                    anchor_ratios: cfg.anchors.ratios.clone(),
                    stride: cfg.anchors.stride,
                };
                let out = train_head(dataset, &train, seed)?;
                info!(
                    "trained objectness head: slope {:.4} over {} batches",
                    out.head.slope,
                    out.batches.len()
                );
                let scorer = LearnedScorer {
                    head: out.head,
                    base: base1,
                };
                (Box::new(scorer), Some(out.batches))
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            stage1,
            stage2,
            detector,
            batch_stats,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Composition of every training batch, when a head was trained.
    pub fn batch_stats(&self) -> Option<&[BatchStat]> {
        self.batch_stats.as_deref()
    }

    /// Final proposals in original coordinates, score-descending.
    pub fn proposals(&self, scene: &Scene) -> Result<Vec<ScoredBox>, HarnessError> {
        let c = &self.cfg.cascade;
        let cascade = Cascade {
            stage1: self.stage1.as_ref(),
            stage2: &self.stage2,
            source: c.effective_source(),
            config: c.config(),
        };
        let a = &self.cfg.anchors;
        let mut runs = Vec::new();
        for (run, view) in views(&self.cfg.merge.rpn.scales, self.cfg.merge.rpn.flip).into_iter().enumerate() {
            let r = Rendered::new(scene, view)?;
            let anchors = generate_anchors(
                r.scene.width.ceil() as u32,
                r.scene.height.ceil() as u32,
                a.stride,
                &a.scales,
                &a.ratios,
            )?;
            let props = cascade.propose(&anchors, &r.scene, run as u64)?;
            let mapped = props
                .iter()
                .map(|p| Ok(ScoredBox::new(r.to_original(&p.bbox)?, p.score())?))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            runs.push(mapped);
        }
        Ok(if runs.len() == 1 {
            runs.pop().unwrap_or_default()
        } else {
            merge_rpn(&runs, c.nms_iou, c.top_n)
        })
    }

    /// Class-wise detections for the top proposals of scene `image`.
    pub fn detect(&self, image: usize, scene: &Scene, proposals: &[ScoredBox]) -> Result<Vec<Detection>, HarnessError> {
        let cfg = &self.cfg;
        let boxes: Vec<BBox> = proposals.iter().take(cfg.eval.proposal_budget).map(|p| p.bbox).collect();
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let mut runs = Vec::new();
        for (run, view) in views(&cfg.merge.frcn.scales, cfg.merge.frcn.flip).into_iter().enumerate() {
            let r = Rendered::new(scene, view)?;
            let in_view = boxes.iter().map(|b| r.to_view(b)).collect::<Result<Vec<_>, _>>()?;
            let mut outs = self.detector.predict(&r.scene, &in_view, run as u64)?;
            for o in &mut outs {
                o.bbox = r.to_original(&o.bbox)?;
            }
            runs.push(outs);
        }
        let merged = if runs.len() == 1 {
            runs.pop().unwrap_or_default()
        } else {
            merge_frcn(&runs)?
        };

        let prior: Option<ContextPrior> = if cfg.context.enabled {
            Some(context_prior_for(scene, cfg.dataset.n_classes, cfg.context.alpha)?.with_background())
        } else {
            None
        };
        let scores = merged
            .iter()
            .map(|o| match &prior {
                Some(p) => apply_context_prior(&o.class_scores, p),
                None => Ok(normalize_scores(&o.class_scores)),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let nms_iou = cfg.eval.nms_preset.threshold();
        let vote_iou = cfg.merge.frcn.vote_iou.unwrap_or(nms_iou);
        let mut dets = Vec::new();
        for c in 0..cfg.dataset.n_classes {
            let candidates = merged
                .iter()
                .zip(&scores)
                .filter(|(_, s)| s[c as usize + 1] >= cfg.eval.min_det_score)
                .map(|(o, s)| ScoredBox::new(o.bbox, s[c as usize + 1].min(1.0)))
                .collect::<Result<Vec<_>, _>>()?;
            for k in nms_indices(&candidates, nms_iou, usize::MAX) {
                let kept = if cfg.merge.frcn.voting {
                    let pool: Vec<ScoredBox> = candidates
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != k)
                        .map(|(_, b)| *b)
                        .collect();
                    box_vote(&candidates[k], &pool, vote_iou)
                } else {
                    candidates[k]
                };
                dets.push(Detection {
                    image,
                    bbox: kept.bbox,
                    score: kept.score(),
                    class_id: c,
                });
            }
        }
        // stable: equal scores keep class order
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(cfg.eval.max_detections);
        Ok(dets)
    }

    pub fn process(&self, image: usize, scene: &Scene) -> Result<SceneResult, HarnessError> {
        let proposals = self.proposals(scene)?;
        let detections = self.detect(image, scene, &proposals)?;
        let gts = scene
            .objects
            .iter()
            .map(|o| GroundTruth {
                image,
                bbox: o.bbox,
                class_id: o.class_id,
                difficult: o.difficult,
            })
            .collect();
        Ok(SceneResult {
            proposals,
            detections,
            gts,
        })
    }

    /// Processes every scene in parallel on the current rayon pool; results
    /// come back in scene order.
    pub fn process_all(&self, dataset: &Dataset) -> Result<Vec<SceneResult>, HarnessError> {
        dataset
            .scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.process(i, s))
            .collect()
    }

    /// Dataset-level metrics from per-scene results, reduced in scene order.
    pub fn report(&self, results: &[SceneResult]) -> Result<EvalReport, HarnessError> {
        let budget = self.cfg.eval.proposal_budget;
        let thresholds = ar_thresholds();
        let mut recall = RecallCounter::new(&thresholds, budget)?;
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for r in results {
            let boxes: Vec<BBox> = r.gts.iter().map(|g| g.bbox).collect();
            recall.add(&r.proposals, &boxes);
            dets.extend_from_slice(&r.detections);
            gts.extend_from_slice(&r.gts);
        }
        let mut report = EvalReport {
            proposal_budget: budget,
            average_recall: recall.mean(),
            ..EvalReport::default()
        };
        for (t, v) in recall.recalls() {
            report.recall_at.insert(IouKey::from_f64(t), v);
        }
        let n_classes = self.cfg.dataset.n_classes;
        for t in [0.5, 0.7] {
            let m = mean_ap(&dets, &gts, n_classes, t);
            if let Some(mean) = m.mean {
                report.map_at.insert(IouKey::from_f64(t), mean);
            }
            if t == 0.5 {
                report.per_class_ap = m.per_class;
            }
        }
        Ok(report)
    }
}

fn check_dataset(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(), HarnessError> {
    for s in &dataset.scenes {
        s.validate()?;
        if let Some(o) = s.objects.iter().find(|o| o.class_id >= cfg.dataset.n_classes) {
            return Err(HarnessError::Dataset(format!(
                "scene {} has class {} but the configuration declares {} classes",
                s.id, o.class_id, cfg.dataset.n_classes
            )));
        }
    }
    Ok(())
}

/// Builds the pipeline, evaluates every scene and reduces to a report.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<EvalReport, HarnessError> {
    check_dataset(cfg, dataset)?;
    let pipeline = Pipeline::build(cfg, dataset)?;
    let results = pipeline.process_all(dataset)?;
    pipeline.report(&results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_dataset, SceneObject};

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml("seed = 3").unwrap();
        c.dataset.n_scenes = 6;
        c
    }

    #[test]
    fn view_mapping_round_trips() {
        let scene = Scene {
            id: 1,
            width: 300.0,
            height: 200.0,
            objects: vec![],
        };
        let b = BBox::new(10.0, 20.0, 90.0, 120.0).unwrap();
        for v in views(&[400, 600], true) {
            let r = Rendered::new(&scene, v).unwrap();
            let back = r.to_original(&r.to_view(&b).unwrap()).unwrap();
            for (x, y) in back.coords().iter().zip(b.coords()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(views(&[], false).len(), 1);
        assert_eq!(views(&[400, 600, 800], true).len(), 6);
    }

    #[test]
    fn experiment_is_deterministic_and_bounded() {
        let c = cfg();
        let d = generate_dataset(&c.dataset, c.seed).unwrap();
        let a = run_experiment(&c, &d).unwrap();
        let b = run_experiment(&c, &d).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recall_at.len(), 10);
        for v in a.recall_at.values().chain(a.map_at.values()).chain([&a.average_recall]) {
            assert!((0.0..=1.0).contains(v));
        }
        let mean = a.recall_at.values().sum::<f64>() / 10.0;
        assert!((mean - a.average_recall).abs() < 1e-12);
    }

    #[test]
    fn multi_view_merging_runs() {
        let mut c = cfg();
        c.dataset.n_scenes = 3;
        c.merge.rpn.scales = vec![300, 400];
        c.merge.rpn.flip = true;
        c.merge.frcn.scales = vec![200, 320];
        c.merge.frcn.flip = true;
        c.merge.frcn.voting = true;
        let d = generate_dataset(&c.dataset, c.seed).unwrap();
        let r = run_experiment(&c, &d).unwrap();
        assert!(r.average_recall > 0.0);
    }

    #[test]
    fn foreign_class_ids_are_rejected() {
        let c = cfg();
        let d = Dataset {
            scenes: vec![Scene {
                id: 0,
                width: 100.0,
                height: 100.0,
                objects: vec![SceneObject {
                    bbox: BBox::new(0.0, 0.0, 20.0, 20.0).unwrap(),
                    class_id: 99,
                    difficult: false,
                }],
            }],
        };
        assert!(matches!(run_experiment(&c, &d), Err(HarnessError::Dataset(_))));
    }
}

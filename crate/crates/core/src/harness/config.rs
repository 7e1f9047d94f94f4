//! Experiment configuration: a TOML document with fixed sections.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{DEFAULT_ANCHOR_RATIOS, DEFAULT_ANCHOR_SCALES, DEFAULT_FEATURE_STRIDE};
use crate::cascade::{CascadeConfig, ProposalSource, SizeKey};
use crate::postprocess::NmsPreset;
use crate::sampling::{LabelThresholds, NpConfig};
use crate::simgen::{DatasetSpec, DetectorNoise, NoiseModel};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The only source of randomness. Required.
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub anchors: AnchorConfig,
    #[serde(default)]
    pub cascade: CascadeSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub context: ContextSection,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: u32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_ANCHOR_SCALES.to_vec(),
            ratios: DEFAULT_ANCHOR_RATIOS.to_vec(),
            stride: DEFAULT_FEATURE_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSection {
    /// Off means stage 1 alone.
    pub enabled: bool,
    /// Output of an enabled cascade.
    pub source: ProposalSource,
    pub size_threshold_area: f64,
    pub size_key: SizeKey,
    pub nms_iou: f64,
    pub top_n: usize,
}

impl Default for CascadeSection {
    fn default() -> Self {
        let c = CascadeConfig::default();
        Self {
            enabled: true,
            source: ProposalSource::Fused,
            size_threshold_area: c.size_threshold_area,
            size_key: c.size_key,
            nms_iou: c.nms_iou,
            top_n: c.top_n,
        }
    }
}

impl CascadeSection {
    pub fn effective_source(&self) -> ProposalSource {
        if self.enabled {
            self.source
        } else {
            ProposalSource::Stage1
        }
    }

    pub fn config(&self) -> CascadeConfig {
        CascadeConfig {
            size_threshold_area: self.size_threshold_area,
            size_key: self.size_key,
            nms_iou: self.nms_iou,
            top_n: self.top_n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    #[serde(deserialize_with = "stage1_noise")]
    pub stage1: NoiseModel,
    /// Keys left out fall back to the stage-2 defaults, not stage 1's.
    #[serde(deserialize_with = "stage2_noise")]
    pub stage2: NoiseModel,
    pub detector: DetectorNoise,
}

/// A noise table where every key is optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoisePatch {
    score_sigma: Option<f64>,
    reg_shrink: Option<f64>,
    reg_sigma: Option<f64>,
    small_object_sigma: Option<f64>,
    small_object_side: Option<f64>,
}

impl NoisePatch {
    fn over(self, base: NoiseModel) -> NoiseModel {
        NoiseModel {
            score_sigma: self.score_sigma.unwrap_or(base.score_sigma),
            reg_shrink: self.reg_shrink.unwrap_or(base.reg_shrink),
            reg_sigma: self.reg_sigma.unwrap_or(base.reg_sigma),
            small_object_sigma: self.small_object_sigma.unwrap_or(base.small_object_sigma),
            small_object_side: self.small_object_side.unwrap_or(base.small_object_side),
            seed: base.seed,
        }
    }
}

fn stage1_noise<'de, D: serde::Deserializer<'de>>(d: D) -> Result<NoiseModel, D::Error> {
    Ok(NoisePatch::deserialize(d)?.over(NoiseModel::stage1()))
}

fn stage2_noise<'de, D: serde::Deserializer<'de>>(d: D) -> Result<NoiseModel, D::Error> {
    Ok(NoisePatch::deserialize(d)?.over(NoiseModel::stage2()))
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            stage1: NoiseModel::stage1(),
            stage2: NoiseModel::stage2(),
            detector: DetectorNoise::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectnessSource {
    /// Noisy overlap evidence used directly.
    #[default]
    Oracle,
    /// Evidence rescored by a head trained with the configured sampling.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub objectness: ObjectnessSource,
    /// Constrained N/P batches instead of fill-to-batch-size.
    pub constrained: bool,
    pub batch_size: usize,
    pub max_np_ratio: f64,
    pub min_batch_size: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub balanced: bool,
    pub ohem: bool,
    pub negative_images: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_scales: Vec<u32>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let np = NpConfig::default();
        let thr = LabelThresholds::default();
        Self {
            objectness: ObjectnessSource::Oracle,
            constrained: true,
            batch_size: np.batch_size,
            max_np_ratio: np.max_np_ratio,
            min_batch_size: np.min_batch_size,
            positive_iou: thr.positive,
            negative_iou: thr.negative,
            balanced: false,
            ohem: false,
            negative_images: true,
            epochs: 2,
            learning_rate: 0.5,
            weight_decay: 0.01,
            train_scales: Vec::new(),
        }
    }
}

impl SamplingSection {
    pub fn np(&self) -> NpConfig {
        NpConfig {
            batch_size: self.batch_size,
            max_np_ratio: self.max_np_ratio,
            min_batch_size: self.min_batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSection {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnMerge {
    /// Test short sides; empty means native resolution only.
    pub scales: Vec<u32>,
    pub flip: bool,
}

impl Default for RpnMerge {
    fn default() -> Self {
        Self {
            scales: Vec::new(),
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrcnMerge {
    pub scales: Vec<u32>,
    pub flip: bool,
    pub voting: bool,
    /// Defaults to the detection NMS threshold.
    pub vote_iou: Option<f64>,
}

impl Default for FrcnMerge {
    fn default() -> Self {
        Self {
            scales: Vec::new(),
            flip: false,
            voting: false,
            vote_iou: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub rpn: RpnMerge,
    pub frcn: FrcnMerge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub nms_preset: NmsPreset,
    pub proposal_budget: usize,
    /// Per-image cap on detections across all classes.
    pub max_detections: usize,
    pub min_det_score: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            nms_preset: NmsPreset::Voc,
            proposal_budget: 300,
            max_detections: 100,
            min_det_score: 0.01,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, HarnessError> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.dataset.validate()?;
        self.noise.stage1.validate()?;
        self.noise.stage2.validate()?;
        self.noise.detector.validate()?;
        self.sampling.np().validate()?;
        if self.anchors.stride == 0 || self.anchors.scales.is_empty() || self.anchors.ratios.is_empty() {
            return bad("anchors need a positive stride and at least one scale and ratio".into());
        }
        let c = &self.cascade;
        if !(c.size_threshold_area >= 0.0) {
            return bad(format!("cascade.size_threshold_area must be >= 0, got {}", c.size_threshold_area));
        }
        if !(c.nms_iou > 0.0 && c.nms_iou < 1.0) {
            return bad(format!("cascade.nms_iou must lie in (0, 1), got {}", c.nms_iou));
        }
        if c.top_n == 0 {
            return bad("cascade.top_n must be positive".into());
        }
        if self.eval.proposal_budget == 0 {
            return bad("eval.proposal_budget must be positive".into());
        }
        if self.eval.max_detections == 0 {
            return bad("eval.max_detections must be positive".into());
        }
        if !(self.context.alpha >= 0.0 && self.context.alpha.is_finite()) {
            return bad(format!("context.alpha must be >= 0, got {}", self.context.alpha));
        }
        if let Some(v) = self.merge.frcn.vote_iou {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("merge.frcn.vote_iou must lie in (0, 1), got {v}"));
            }
        }
        if self.merge.rpn.scales.contains(&0) || self.merge.frcn.scales.contains(&0) {
            return bad("merge scales must be positive".into());
        }
        let t = &self.sampling;
        if !(t.negative_iou <= t.positive_iou) {
            return bad("sampling.negative_iou must not exceed sampling.positive_iou".into());
        }
        if t.objectness == ObjectnessSource::Learned && t.epochs == 0 {
            return bad("learned objectness needs sampling.epochs > 0".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// Formatting, key order and spelled-out defaults do not change it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_noise_tables_keep_their_stage_defaults() {
        let c = ExperimentConfig::from_toml("seed = 1\n[noise.stage2]\nsmall_object_sigma = 0.3\n").unwrap();
        assert_eq!(c.noise.stage2.reg_sigma, NoiseModel::stage2().reg_sigma);
        assert_eq!(c.noise.stage2.small_object_sigma, 0.3);
        assert_eq!(c.noise.stage1, NoiseModel::stage1());
    }

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("").is_err());
        let e = ExperimentConfig::from_toml("seed = 1\n[cascade]\nenabeld = true\n").unwrap_err();
        assert!(e.to_string().contains("enabeld"), "{e}");
        assert!(ExperimentConfig::from_toml("seed = 1\n[noise.stage1]\nsigma = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[eval]\nnms_preset = \"pascal\"\n").is_err());
    }

    #[test]
    fn hash_ignores_formatting_and_spelled_out_defaults() {
        let a = ExperimentConfig::from_toml("seed = 5").unwrap();
        let b = ExperimentConfig::from_toml("# comment\nseed   =   5\n[cascade]\nenabled = true\ntop_n = 300\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = ExperimentConfig::from_toml("seed = 6").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut a = ExperimentConfig::from_toml("seed = 9").unwrap();
        a.merge.frcn.vote_iou = Some(0.5);
        a.context.enabled = true;
        let back = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, back);
    }
}

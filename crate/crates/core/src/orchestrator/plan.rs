use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::PolicyConfig;
use crate::decoder_graph::{DecoderOptions, NormKind};
use crate::error::{Error, Result};
use crate::toyland::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    NegLoss,
    ToyAp,
}

/// Which parts of the decoder are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// FPN only, the original head is kept.
    F,
    /// Head only, on top of the original FPN.
    H,
    /// FPN first, then the head on the best FPN.
    Fh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPlan {
    pub n_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    /// Meta-train fraction; the rest is meta-val.
    pub split: f64,
    /// Images generated with an independent seed for AP studies.
    pub holdout_images: usize,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        Self {
            n_images: 1000,
            image_size: 128,
            num_classes: 3,
            max_objects: 3,
            split: 0.7,
            holdout_images: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackbonePlan {
    pub widths: [usize; 4],
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackbonePlan {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 128],
            iterations: 600,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyPlan {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub polyak_decay: f64,
    pub eval_batch: usize,
}

impl Default for ProxyPlan {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 16,
            lr: 8e-4,
            polyak_decay: 0.9,
            eval_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderPlan {
    pub fpn_width: usize,
    pub head_width: usize,
    pub fpn_norm: NormKind,
    pub groups: usize,
}

impl Default for DecoderPlan {
    fn default() -> Self {
        Self {
            fpn_width: 64,
            head_width: 128,
            fpn_norm: NormKind::Batch,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchPlanSection {
    pub space: SearchSpace,
    pub reward: RewardMode,
    pub fpn_archs: usize,
    pub head_archs: usize,
    pub top_k_fpn: usize,
    pub top_k_head: usize,
    /// Sample uniformly instead of from the controller.
    pub random: bool,
}

impl Default for SearchPlanSection {
    fn default() -> Self {
        Self {
            space: SearchSpace::Fh,
            reward: RewardMode::NegLoss,
            fpn_archs: 560,
            head_archs: 120,
            top_k_fpn: 20,
            top_k_head: 10,
            random: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApPlan {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub iou_thresh: f32,
    pub max_per_image: usize,
}

impl Default for ApPlan {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.6,
            iou_thresh: 0.5,
            max_per_image: 100,
        }
    }
}

/// Complete, serialisable description of a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchPlan {
    pub seed: u64,
    pub dataset: DatasetPlan,
    pub backbone: BackbonePlan,
    pub proxy: ProxyPlan,
    pub decoder: DecoderPlan,
    pub search: SearchPlanSection,
    pub controller: PolicyConfig,
    pub ap: ApPlan,
}

impl Default for SearchPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetPlan::default(),
            backbone: BackbonePlan::default(),
            proxy: ProxyPlan::default(),
            decoder: DecoderPlan::default(),
            search: SearchPlanSection::default(),
            controller: PolicyConfig::default(),
            ap: ApPlan::default(),
        }
    }
}

impl SearchPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(m));
        if !(self.dataset.split > 0.0 && self.dataset.split < 1.0) {
            return bad(format!("split {} is outside (0, 1)", self.dataset.split));
        }
        if !(0.0..1.0).contains(&self.proxy.polyak_decay) {
            return bad(format!("polyak decay {} is outside [0, 1)", self.proxy.polyak_decay));
        }
        if self.decoder.fpn_width == 0 || self.decoder.head_width == 0 {
            return bad("widths must be positive".into());
        }
        let (train, val) = self.split_sizes();
        if train == 0 || val == 0 {
            return bad(format!("{} images cannot be split {}", self.dataset.n_images, self.dataset.split));
        }
        if self.proxy.batch_size == 0 || self.proxy.eval_batch == 0 || self.backbone.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.dataset.image_size % 128 != 0 && self.dataset.image_size % 32 != 0 {
            return bad(format!("image size {} must be a multiple of 32", self.dataset.image_size));
        }
        self.controller.validate()
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let train = (self.dataset.n_images as f64 * self.dataset.split).round() as usize;
        (train, self.dataset.n_images - train.min(self.dataset.n_images))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: crate::seed::derive_str(self.seed, "dataset"),
            n_images: self.dataset.n_images,
            image_size: self.dataset.image_size,
            num_classes: self.dataset.num_classes,
            max_objects: self.dataset.max_objects,
        }
    }

    pub fn holdout_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: crate::seed::derive_str(self.seed, "holdout"),
            n_images: self.dataset.holdout_images.max(1),
            ..self.dataset_spec()
        }
    }

    /// Decoder options of a stage: stage 1 keeps the original head at the
    /// FPN width, stage 2 widens the head.
    pub fn decoder_options(&self, head_width: usize) -> DecoderOptions {
        DecoderOptions {
            fpn_width: self.decoder.fpn_width,
            head_width,
            num_classes: self.dataset.num_classes,
            fpn_norm: self.decoder.fpn_norm,
            groups: self.decoder.groups,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: SearchPlan = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let plan: SearchPlan = serde_json::from_str(&text)?;
            plan.validate()?;
            Ok(plan)
        } else {
            Self::from_toml(&text)
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("plan serialises"))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

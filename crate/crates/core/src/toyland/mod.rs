//! Synthetic detection task: shapes on noise, FCOS-style pyramid targets,
//! the three detection losses and a single-threshold AP evaluator.

mod ap;
mod dataset;
mod loss;
mod targets;

pub use ap::{box_iou, decode_detections, evaluate_ap, nms, ApReport, Detection, LevelPredictions};
pub use dataset::{
    dataset_from_bytes, dataset_to_bytes, generate_dataset, Box4, DatasetSpec, Object, ShapeKind, SynthImage,
    DATASET_VERSION,
};
pub use loss::{batch_losses, reward, LossConfig, LossTerms, LossVars};
pub use targets::{centerness, encode_targets, level_ranges, LevelGrid, LevelTargets, PyramidTargets};

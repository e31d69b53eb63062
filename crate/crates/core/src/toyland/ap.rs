use serde::{Deserialize, Serialize};

use super::dataset::{Box4, Object};
use nfcs_tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f32,
    pub bbox: Box4,
}

pub fn box_iou(a: &Box4, b: &Box4) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: &Box4| (x[2] - x[0]).max(0.0) * (x[3] - x[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class suppression, highest score first. Ties keep the
/// earlier detection.
pub fn nms(mut dets: Vec<Detection>, iou: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class != d.class || k.image != d.image || box_iou(&k.bbox, &d.bbox) <= iou)
        {
            keep.push(d);
        }
    }
    keep
}

/// Raw per-level network outputs of a batch: classification and
/// centerness logits plus decoded `(l, t, r, b)` distances in pixels.
pub struct LevelPredictions<'a> {
    pub stride: usize,
    pub cls: &'a Tensor<f32>,
    pub reg: &'a Tensor<f32>,
    pub ctr: &'a Tensor<f32>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes boxes at every location, scores them as class probability times
/// centerness, and applies NMS per image. `first_image` offsets the image
/// index of the batch.
pub fn decode_detections(
    levels: &[LevelPredictions<'_>],
    first_image: usize,
    score_thresh: f32,
    nms_iou: f32,
    max_per_image: usize,
) -> Vec<Detection> {
    let Some(l0) = levels.first() else {
        return Vec::new();
    };
    let n = l0.cls.shape()[0];
    let k = l0.cls.shape()[1];
    let mut out = Vec::new();
    for img in 0..n {
        let mut dets = Vec::new();
        for lv in levels {
            let (h, w) = (lv.cls.shape()[2], lv.cls.shape()[3]);
            let hw = h * w;
            let s = lv.stride as f32;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let ctr = sigmoid(lv.ctr.data()[img * hw + p]);
                    let (x, y) = (j as f32 * s + s / 2.0, i as f32 * s + s / 2.0);
                    let d: [f32; 4] = std::array::from_fn(|c| lv.reg.data()[(img * 4 + c) * hw + p]);
                    for c in 0..k {
                        let score = sigmoid(lv.cls.data()[(img * k + c) * hw + p]) * ctr;
                        if score > score_thresh {
                            dets.push(Detection {
                                image: first_image + img,
                                class: c,
                                score,
                                bbox: [x - d[0], y - d[1], x + d[2], y + d[3]],
                            });
                        }
                    }
                }
            }
        }
        let mut kept = nms(dets, nms_iou);
        kept.truncate(max_per_image);
        out.extend(kept);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Single-threshold AP with 101-point interpolation, averaged over the
/// classes that have ground truth.
pub fn evaluate_ap(dets: &[Detection], ground_truth: &[Vec<Object>], num_classes: usize, iou_thresh: f32) -> ApReport {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| class_ap(dets, ground_truth, c, iou_thresh))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport { per_class, mean }
}

fn class_ap(dets: &[Detection], gt: &[Vec<Object>], class: usize, thresh: f32) -> Option<f64> {
    let total: usize = gt.iter().map(|objs| objs.iter().filter(|o| o.class == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|o| vec![false; o.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ds.len());
    for (rank, d) in ds.iter().enumerate() {
        let mut best: Option<(f32, usize)> = None;
        if let Some(objs) = gt.get(d.image) {
            for (gi, o) in objs.iter().enumerate() {
                if o.class != class || used[d.image][gi] {
                    continue;
                }
                let iou = box_iou(&d.bbox, &o.bbox);
                if iou >= thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
        }
        if let Some((_, gi)) = best {
            used[d.image][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope, then sample at recall 0, 0.01, ..., 1.
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        while idx < envelope.len() && envelope[idx].0 < rt - 1e-12 {
            idx += 1;
        }
        if idx < envelope.len() {
            sum += envelope[idx].1;
        }
    }
    Some(sum / 101.0)
}

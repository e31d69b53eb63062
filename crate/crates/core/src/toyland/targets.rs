use nfcs_tensor::Tensor;

use super::dataset::{Box4, SynthImage};
use crate::decoder_graph::PYRAMID_STRIDES;

/// Size-of-interest intervals `(lo, hi]` per level, scaled from the
/// 128-px reference canvas.
pub fn level_ranges(image_size: usize) -> [(f32, f32); 5] {
    let k = image_size as f32 / 128.0;
    [
        (0.0, 16.0 * k),
        (16.0 * k, 32.0 * k),
        (32.0 * k, 64.0 * k),
        (64.0 * k, 128.0 * k),
        (128.0 * k, f32::INFINITY),
    ]
}

/// Location grid of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGrid {
    pub fn for_image(size: usize) -> Vec<LevelGrid> {
        PYRAMID_STRIDES
            .iter()
            .map(|&s| LevelGrid {
                stride: s,
                height: size.div_ceil(s),
                width: size.div_ceil(s),
            })
            .collect()
    }

    /// Image coordinates of location `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> (f32, f32) {
        let s = self.stride as f32;
        (j as f32 * s + s / 2.0, i as f32 * s + s / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub grid: LevelGrid,
    /// Class per location, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// `(l, t, r, b)` distances in pixels; zero at background.
    pub reg: Vec<[f32; 4]>,
    pub ctr: Vec<f32>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidTargets {
    pub levels: Vec<LevelTargets>,
}

impl PyramidTargets {
    pub fn positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::positives).sum()
    }

    /// `(K + 4 + 1) x H x W` tensor of level `l`: one-hot classes, box
    /// distances, centerness.
    pub fn level_tensor(&self, l: usize, num_classes: usize) -> Tensor<f32> {
        let lv = &self.levels[l];
        let hw = lv.grid.height * lv.grid.width;
        let mut data = vec![0.0f32; (num_classes + 5) * hw];
        for p in 0..hw {
            if let Some(k) = lv.labels[p] {
                data[k * hw + p] = 1.0;
                for d in 0..4 {
                    data[(num_classes + d) * hw + p] = lv.reg[p][d];
                }
                data[(num_classes + 4) * hw + p] = lv.ctr[p];
            }
        }
        Tensor::from_parts(vec![num_classes + 5, lv.grid.height, lv.grid.width], data)
    }
}

pub fn centerness(d: [f32; 4]) -> f32 {
    let [l, t, r, b] = d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

fn distances(bbox: &Box4, x: f32, y: f32) -> [f32; 4] {
    [x - bbox[0], y - bbox[1], bbox[2] - x, bbox[3] - y]
}

/// FCOS assignment: a location is positive for the smallest-area box that
/// contains it and whose largest distance falls in the level's range.
pub fn encode_targets(image: &SynthImage, grids: &[LevelGrid], ranges: &[(f32, f32)]) -> PyramidTargets {
    let levels = grids
        .iter()
        .zip(ranges)
        .map(|(grid, &(lo, hi))| {
            let n = grid.height * grid.width;
            let mut labels = vec![None; n];
            let mut reg = vec![[0.0f32; 4]; n];
            let mut ctr = vec![0.0f32; n];
            for i in 0..grid.height {
                for j in 0..grid.width {
                    let (x, y) = grid.center(i, j);
                    let mut best: Option<(f32, usize, [f32; 4])> = None;
                    for o in &image.objects {
                        let d = distances(&o.bbox, x, y);
                        if d.iter().any(|&v| v <= 0.0) {
                            continue;
                        }
                        let m = d.iter().copied().fold(0.0f32, f32::max);
                        if m <= lo || m > hi {
                            continue;
                        }
                        let area = o.area();
                        if best.is_none_or(|(a, _, _)| area < a) {
                            best = Some((area, o.class, d));
                        }
                    }
                    if let Some((_, class, d)) = best {
                        let p = i * grid.width + j;
                        labels[p] = Some(class);
                        reg[p] = d;
                        ctr[p] = centerness(d);
                    }
                }
            }
            LevelTargets {
                grid: *grid,
                labels,
                reg,
                ctr,
            }
        })
        .collect();
    PyramidTargets { levels }
}

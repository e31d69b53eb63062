use nfcs_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::targets::PyramidTargets;
use crate::decoder_graph::LevelOutput;
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Per-image loss terms of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.ctr
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }

    pub fn add(&self, other: &LossTerms) -> LossTerms {
        LossTerms {
            cls: self.cls + other.cls,
            reg: self.reg + other.reg,
            ctr: self.ctr + other.ctr,
        }
    }
}

/// Loss terms of a batch, each of shape `[N]`.
pub struct LossVars<'g, T: Scalar> {
    pub cls: Var<'g, T>,
    pub reg: Var<'g, T>,
    pub ctr: Var<'g, T>,
}

impl<'g, T: Scalar> LossVars<'g, T> {
    /// Batch mean of the summed terms, the training objective.
    pub fn mean_total(&self) -> Result<Var<'g, T>> {
        Ok(Var::add_n(&[self.cls, self.reg, self.ctr])?.mean())
    }

    pub fn per_image(&self) -> Vec<LossTerms> {
        let (c, r, t) = (self.cls.value(), self.reg.value(), self.ctr.value());
        (0..c.numel())
            .map(|i| LossTerms {
                cls: c.data()[i].to_f64().unwrap_or(f64::NAN),
                reg: r.data()[i].to_f64().unwrap_or(f64::NAN),
                ctr: t.data()[i].to_f64().unwrap_or(f64::NAN),
            })
            .collect()
    }
}

/// `R = -sum over images of (cls + reg + ctr)`.
pub fn reward(terms: &[LossTerms]) -> f64 {
    -terms.iter().map(LossTerms::total).sum::<f64>()
}

fn constant<'g, T: Scalar>(g: &'g Graph<T>, shape: Vec<usize>, data: Vec<f64>) -> Var<'g, T> {
    g.constant(Tensor::from_parts(shape, data.into_iter().map(T::c).collect()))
}

/// Focal, IoU and centerness losses of a batch against its targets.
///
/// Classification is summed over all locations and classes; regression and
/// centerness are summed over positives. Each is divided by the image's
/// positive count (at least one).
pub fn batch_losses<'g, T: Scalar>(
    outputs: &[LevelOutput<'g, T>],
    targets: &[&PyramidTargets],
    cfg: &LossConfig,
) -> Result<LossVars<'g, T>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidConfig("no pyramid levels to score".into()))?;
    let g = first.cls.graph();
    let n = targets.len();
    let k = first.cls.shape()[1];
    let inv_pos: Vec<f64> = targets.iter().map(|t| 1.0 / t.positives().max(1) as f64).collect();
    let (lo, hi) = (T::c(PROB_EPS), T::c(1.0 - PROB_EPS));

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut ctr_terms = Vec::new();
    for (l, out) in outputs.iter().enumerate() {
        let shape = out.cls.shape();
        let (h, w) = (shape[2], shape[3]);
        let hw = h * w;
        if shape[0] != n || shape[1] != k {
            return Err(Error::InvalidConfig(format!("level {l} predictions {shape:?} for {n} images")));
        }
        let mut y = vec![0.0; n * k * hw];
        let mut mask = vec![0.0; n * hw];
        let mut treg = vec![1.0; n * 4 * hw];
        let mut tctr = vec![0.0; n * hw];
        for (i, t) in targets.iter().enumerate() {
            let lv = t.levels.get(l).ok_or_else(|| Error::InvalidConfig("target level missing".into()))?;
            if lv.grid.height != h || lv.grid.width != w {
                return Err(Error::InvalidConfig(format!(
                    "level {l} targets are {}x{}, predictions {h}x{w}",
                    lv.grid.height, lv.grid.width
                )));
            }
            for p in 0..hw {
                if let Some(c) = lv.labels[p] {
                    y[(i * k + c) * hw + p] = 1.0;
                    mask[i * hw + p] = 1.0;
                    for d in 0..4 {
                        treg[(i * 4 + d) * hw + p] = lv.reg[p][d] as f64;
                    }
                    tctr[i * hw + p] = lv.ctr[p] as f64;
                }
            }
        }
        let cls_shape = vec![n, k, h, w];
        let a = cfg.alpha;
        let alpha_t = constant(g, cls_shape.clone(), y.iter().map(|&v| a * v + (1.0 - a) * (1.0 - v)).collect());
        let sign = constant(g, cls_shape.clone(), y.iter().map(|&v| 2.0 * v - 1.0).collect());
        let offset = constant(g, cls_shape, y.iter().map(|&v| 1.0 - v).collect());
        let p = out.cls.sigmoid().clamp(lo, hi);
        let pt = p.mul(sign)?.add(offset)?;
        let modulator = pt.neg().add_scalar(T::one()).powf(T::c(cfg.gamma));
        let focal = pt.log().neg().mul(modulator)?.mul(alpha_t)?;
        cls_terms.push(focal.sum_per_item()?);

        let m = constant(g, vec![n, 1, h, w], mask);
        let side = |d: usize| constant(g, vec![n, 1, h, w], treg[..].chunks(hw).skip(d).step_by(4).flatten().copied().collect());
        let (tl, tt, tr, tb) = (side(0), side(1), side(2), side(3));
        let pl = out.reg.slice(1, 0, 1)?;
        let pt_ = out.reg.slice(1, 1, 1)?;
        let pr = out.reg.slice(1, 2, 1)?;
        let pb = out.reg.slice(1, 3, 1)?;
        let pred_area = pl.add(pr)?.mul(pt_.add(pb)?)?;
        let tgt_area = tl.add(tr)?.mul(tt.add(tb)?)?;
        let iw = pl.minimum(tl)?.add(pr.minimum(tr)?)?;
        let ih = pt_.minimum(tt)?.add(pb.minimum(tb)?)?;
        let inter = iw.mul(ih)?;
        let union = pred_area.add(tgt_area)?.sub(inter)?;
        let iou_loss = union.log().sub(inter.log())?;
        reg_terms.push(iou_loss.mul(m)?.sum_per_item()?);

        let c = constant(g, vec![n, 1, h, w], tctr.clone());
        let c_neg = constant(g, vec![n, 1, h, w], tctr.iter().map(|v| 1.0 - v).collect());
        let q = out.ctr.sigmoid().clamp(lo, hi);
        let bce = q.log().mul(c)?.add(q.neg().add_scalar(T::one()).log().mul(c_neg)?)?.neg();
        ctr_terms.push(bce.mul(m)?.sum_per_item()?);
    }
    let norm = constant(g, vec![n], inv_pos);
    Ok(LossVars {
        cls: Var::add_n(&cls_terms)?.mul(norm)?,
        reg: Var::add_n(&reg_terms)?.mul(norm)?,
        ctr: Var::add_n(&ctr_terms)?.mul(norm)?,
    })
}

//! Proxy task: train a decoder briefly on meta-train, score it on meta-val.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use nfcs_tensor::{polyak_update, Adam, AdamConfig, Graph, ParamStore, ParamVars, Tensor};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::cache::{FeatureCache, ImageSet};
use super::plan::{RewardMode, SearchPlan};
use crate::decoder_graph::{
    apply_bn_stats, compile_parts, DecoderGraph, FpnKind, HeadKind, LevelOutput, Mode, PYRAMID_LEVELS,
};
use crate::error::{Error, Result};
use crate::search_space::{decode_fpn, decode_head, FPN_TOKENS, HEAD_TOKENS, NUM_INPUTS};
use crate::seed;
use crate::toyland::{batch_losses, decode_detections, evaluate_ap, LevelPredictions, LossConfig, LossTerms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageKind {
    Fpn,
    Head,
}

/// One architecture evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalJob {
    pub id: u64,
    pub stage: StageKind,
    pub tokens: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Diverged,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub job_id: u64,
    /// `None` when training diverged or failed.
    pub reward: Option<f64>,
    /// Loss terms summed over meta-val.
    pub terms: Option<LossTerms>,
    /// Toy AP on meta-val.
    pub ap: Option<f64>,
    pub status: EvalStatus,
    pub wall_ms: f64,
}

/// Pyramid outputs of a fixed, trained FPN for every image.
pub struct PyramidCache {
    pub fpn: FpnKind,
    pub data: Vec<[Tensor<f32>; PYRAMID_LEVELS]>,
    pub holdout: Vec<[Tensor<f32>; PYRAMID_LEVELS]>,
}

/// Graph of a job: FPN jobs keep the original head at the FPN width, head
/// jobs sit on `head_fpn` at the head width.
pub fn stage_graph(plan: &SearchPlan, stage: StageKind, tokens: &[usize], head_fpn: FpnKind) -> Result<DecoderGraph> {
    let specs = Backbone::new(plan.backbone.widths).feature_specs(plan.dataset.image_size);
    let expected = match stage {
        StageKind::Fpn => FPN_TOKENS,
        StageKind::Head => HEAD_TOKENS,
    };
    if tokens.len() != expected {
        return Err(Error::TokenLength {
            expected,
            got: tokens.len(),
        });
    }
    match stage {
        StageKind::Fpn => compile_parts(
            FpnKind::Searched(decode_fpn(tokens)?),
            HeadKind::Original,
            specs,
            plan.decoder_options(plan.decoder.fpn_width),
        ),
        StageKind::Head => compile_parts(
            head_fpn,
            HeadKind::Searched(decode_head(tokens)?),
            specs,
            plan.decoder_options(plan.decoder.head_width),
        ),
    }
}

/// Shared, read-only state of evaluations.
pub struct EvalContext {
    pub plan: SearchPlan,
    pub cache: Arc<FeatureCache>,
    /// Set during head search; head jobs then start from cached pyramids.
    pub pyramid: Option<Arc<PyramidCache>>,
    /// Recompute backbone features from pixels instead of reading the cache.
    pub live_backbone: bool,
    /// Number of FPN forward passes run so far.
    pub fpn_forwards: AtomicU64,
}

/// Which images a pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSource {
    Data,
    Holdout,
}

/// A trained decoder: Polyak-averaged parameters plus the loss curve.
pub struct Trained {
    pub graph: DecoderGraph,
    pub params: ParamStore<f32>,
    pub buffers: ParamStore<f32>,
    pub losses: Vec<f64>,
    pub diverged: bool,
}

/// Scores of a trained decoder on a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub per_image: Vec<LossTerms>,
    pub terms: LossTerms,
    pub ap: Option<f64>,
}

impl Score {
    pub fn neg_loss(&self) -> f64 {
        crate::toyland::reward(&self.per_image)
    }
}

impl EvalContext {
    pub fn new(plan: SearchPlan, cache: Arc<FeatureCache>) -> Self {
        Self {
            plan,
            cache,
            pyramid: None,
            live_backbone: false,
            fpn_forwards: AtomicU64::new(0),
        }
    }

    pub fn fpn_forward_count(&self) -> u64 {
        self.fpn_forwards.load(Ordering::Relaxed)
    }

    fn set(&self, source: ImageSource) -> &ImageSet {
        match source {
            ImageSource::Data => &self.cache.data,
            ImageSource::Holdout => &self.cache.holdout,
        }
    }

    pub fn job_graph(&self, stage: StageKind, tokens: &[usize]) -> Result<DecoderGraph> {
        let fpn = self.pyramid.as_ref().map_or(FpnKind::Original, |p| p.fpn);
        stage_graph(&self.plan, stage, tokens, fpn)
    }

    fn uses_pyramid(&self, graph: &DecoderGraph) -> bool {
        self.pyramid.as_ref().is_some_and(|p| p.fpn == graph.fpn && matches!(graph.head, HeadKind::Searched(_)))
    }

    fn forward_batch<'g>(
        &self,
        g: &'g Graph<f32>,
        pv: &ParamVars<'g, f32>,
        trained: (&DecoderGraph, &ParamStore<f32>),
        source: ImageSource,
        idx: &[usize],
        mode: Mode,
        stats: &mut Vec<crate::decoder_graph::BnStats<f32>>,
    ) -> Result<Vec<LevelOutput<'g, f32>>> {
        let (graph, buffers) = trained;
        if self.uses_pyramid(graph) {
            let pyr = self.pyramid.as_ref().expect("checked");
            let levels = match source {
                ImageSource::Data => &pyr.data,
                ImageSource::Holdout => &pyr.holdout,
            };
            let p: [_; PYRAMID_LEVELS] = std::array::from_fn(|l| {
                let items: Vec<Tensor<f32>> = idx.iter().map(|&i| levels[i][l].clone()).collect();
                g.constant(Tensor::stack(&items).expect("pyramid shapes agree"))
            });
            return graph.forward_head(pv, buffers, &p, mode, stats);
        }
        let inputs = if self.live_backbone {
            let bb = g.constant(self.set(source).pixels(idx));
            let frozen = self.cache.backbone_params.attach_frozen(g);
            self.cache.backbone.forward(&frozen, bb)?.map(|v| g.constant(v.value()))
        } else {
            let feats = match source {
                ImageSource::Data => &self.cache.features,
                ImageSource::Holdout => &self.cache.holdout_features,
            };
            let stacked: [Tensor<f32>; NUM_INPUTS] = std::array::from_fn(|l| {
                let items: Vec<Tensor<f32>> = idx.iter().map(|&i| feats[i][l].clone()).collect();
                Tensor::stack(&items).expect("feature shapes agree")
            });
            stacked.map(|t| g.constant(t))
        };
        self.fpn_forwards.fetch_add(1, Ordering::Relaxed);
        graph.forward(pv, buffers, inputs, mode, stats)
    }

    /// Adam with Polyak averaging on meta-train minibatches.
    pub fn train(&self, graph: DecoderGraph, job_seed: u64, iterations: usize) -> Result<Trained> {
        let (mut params, mut buffers) = graph.init_params::<f32>(seed::derive(job_seed, 0));
        if self.uses_pyramid(&graph) {
            params = params.filter(|n| n.starts_with("head."));
            buffers = buffers.filter(|n| n.starts_with("head."));
        }
        let mut avg = params.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(self.plan.proxy.lr), &params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(job_seed, 1));
        let train = &self.cache.split.train;
        let mask = self.cache.split.train_mask(self.cache.data.len());
        let batch = self.plan.proxy.batch_size.min(train.len());
        let cfg = LossConfig::default();
        let mut losses = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let idx: Vec<usize> = train.choose_multiple(&mut rng, batch).copied().collect();
            assert!(idx.iter().all(|&i| mask[i]), "proxy training batch touched meta-val");
            let g = Graph::new();
            let pv = params.attach(&g);
            let mut stats = Vec::new();
            let out = self.forward_batch(&g, &pv, (&graph, &buffers), ImageSource::Data, &idx, Mode::Train, &mut stats)?;
            let targets: Vec<_> = idx.iter().map(|&i| &self.cache.data.targets[i]).collect();
            let loss = batch_losses(&out, &targets, &cfg)?.mean_total()?;
            let lv = loss.value().item() as f64;
            losses.push(lv);
            if !lv.is_finite() {
                return Ok(Trained {
                    graph,
                    params: avg,
                    buffers,
                    losses,
                    diverged: true,
                });
            }
            let grads = g.backward(loss)?;
            let grads = pv.gradients(&grads);
            adam.step(&mut params, &grads)?;
            polyak_update(&mut avg, &params, self.plan.proxy.polyak_decay)?;
            apply_bn_stats(&mut buffers, &stats)?;
        }
        let diverged = !avg.all_finite();
        Ok(Trained {
            graph,
            params: avg,
            buffers,
            losses,
            diverged,
        })
    }

    /// Per-image loss terms, and toy AP when `with_ap`, in eval mode.
    pub fn score(&self, trained: &Trained, source: ImageSource, idx: &[usize], with_ap: bool) -> Result<Score> {
        let cfg = LossConfig::default();
        let set = self.set(source);
        let mut per_image = Vec::with_capacity(idx.len());
        let mut dets = Vec::new();
        for (c, chunk) in idx.chunks(self.plan.proxy.eval_batch).enumerate() {
            let g = Graph::new();
            let pv = trained.params.attach_frozen(&g);
            let mut stats = Vec::new();
            let out = self.forward_batch(
                &g,
                &pv,
                (&trained.graph, &trained.buffers),
                source,
                chunk,
                Mode::Eval,
                &mut stats,
            )?;
            let targets: Vec<_> = chunk.iter().map(|&i| &set.targets[i]).collect();
            per_image.extend(batch_losses(&out, &targets, &cfg)?.per_image());
            if with_ap {
                let vals: Vec<_> = out.iter().map(|o| (o.stride, o.cls.value(), o.reg.value(), o.ctr.value())).collect();
                let levels: Vec<LevelPredictions<'_>> = vals
                    .iter()
                    .map(|(s, cls, reg, ctr)| LevelPredictions {
                        stride: *s,
                        cls,
                        reg,
                        ctr,
                    })
                    .collect();
                let ap = &self.plan.ap;
                dets.extend(decode_detections(
                    &levels,
                    c * self.plan.proxy.eval_batch,
                    ap.score_thresh,
                    ap.nms_iou,
                    ap.max_per_image,
                ));
            }
        }
        let terms = per_image.iter().fold(LossTerms::default(), |a, t| a.add(t));
        let ap = with_ap.then(|| {
            let gt: Vec<_> = idx.iter().map(|&i| set.images[i].objects.clone()).collect();
            evaluate_ap(&dets, &gt, self.plan.dataset.num_classes, self.plan.ap.iou_thresh).mean
        });
        Ok(Score { per_image, terms, ap })
    }

    /// Full proxy evaluation of one job under the plan's reward.
    pub fn evaluate(&self, job: &EvalJob) -> EvalOutcome {
        let start = Instant::now();
        let mut out = match self.evaluate_inner(job) {
            Ok(o) => o,
            Err(e) => EvalOutcome {
                job_id: job.id,
                reward: None,
                terms: None,
                ap: None,
                status: EvalStatus::Error(e.to_string()),
                wall_ms: 0.0,
            },
        };
        out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn evaluate_inner(&self, job: &EvalJob) -> Result<EvalOutcome> {
        let graph = self.job_graph(job.stage, &job.tokens)?;
        let trained = self.train(graph, job.seed, self.plan.proxy.iterations)?;
        let diverged = EvalOutcome {
            job_id: job.id,
            reward: None,
            terms: None,
            ap: None,
            status: EvalStatus::Diverged,
            wall_ms: 0.0,
        };
        if trained.diverged {
            return Ok(diverged);
        }
        let score = self.score(&trained, ImageSource::Data, &self.cache.split.val, true)?;
        let reward = match self.plan.search.reward {
            RewardMode::NegLoss => score.neg_loss(),
            RewardMode::ToyAp => score.ap.unwrap_or(0.0),
        };
        if !reward.is_finite() || !score.terms.is_finite() {
            return Ok(EvalOutcome {
                terms: Some(score.terms).filter(LossTerms::is_finite),
                ..diverged
            });
        }
        Ok(EvalOutcome {
            job_id: job.id,
            reward: Some(reward),
            terms: Some(score.terms),
            ap: score.ap,
            status: EvalStatus::Ok,
            wall_ms: 0.0,
        })
    }

    /// Trains the FPN of `fpn` under the original head and caches its
    /// pyramid outputs for every image.
    pub fn prefetch_pyramid(&self, fpn: FpnKind, job_seed: u64) -> Result<PyramidCache> {
        let specs = self.cache.backbone.feature_specs(self.plan.dataset.image_size);
        let graph = compile_parts(
            fpn,
            HeadKind::Original,
            specs,
            self.plan.decoder_options(self.plan.decoder.fpn_width),
        )?;
        let trained = self.train(graph, job_seed, self.plan.proxy.iterations)?;
        if trained.diverged {
            return Err(Error::Diverged("the selected FPN diverged while re-training".into()));
        }
        let run = |feats: &[[Tensor<f32>; NUM_INPUTS]]| -> Result<Vec<[Tensor<f32>; PYRAMID_LEVELS]>> {
            let mut out = Vec::with_capacity(feats.len());
            let idx: Vec<usize> = (0..feats.len()).collect();
            for chunk in idx.chunks(self.plan.proxy.eval_batch) {
                let g = Graph::new();
                let pv = trained.params.attach_frozen(&g);
                let inputs: [_; NUM_INPUTS] = std::array::from_fn(|l| {
                    let items: Vec<Tensor<f32>> = chunk.iter().map(|&i| feats[i][l].clone()).collect();
                    g.constant(Tensor::stack(&items).expect("feature shapes agree"))
                });
                let p = trained.graph.forward_fpn(&pv, &trained.buffers, inputs, Mode::Eval, &mut Vec::new())?;
                let vals = p.map(|v| v.value());
                out.extend((0..chunk.len()).map(|i| std::array::from_fn(|l| vals[l].index0(i))));
            }
            Ok(out)
        };
        Ok(PyramidCache {
            fpn,
            data: run(&self.cache.features)?,
            holdout: run(&self.cache.holdout_features)?,
        })
    }
}

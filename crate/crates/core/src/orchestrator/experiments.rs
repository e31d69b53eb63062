//! Studies run on top of search logs: reward/AP correlation, reward and
//! space ablations, and the deformable-FPN baseline.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cache::FeatureCache;
use super::plan::{RewardMode, SearchPlan, SearchSpace};
use super::proxy::{EvalContext, ImageSource, StageKind};
use super::search::{job_seed, spearman, top_k, LocalEvaluator, Search, SearchPaths, SearchRecord};
use crate::decoder_graph::{compile_parts, FpnKind, HeadKind};
use crate::error::{Error, Result};

/// Up to `n` records of one stage spread evenly over the reward ranking.
pub fn spanning_sample(records: &[SearchRecord], stage: StageKind, n: usize) -> Vec<SearchRecord> {
    let mut r: Vec<&SearchRecord> = records.iter().filter(|r| r.stage == stage && r.reward.is_some()).collect();
    r.sort_by(|a, b| a.reward.partial_cmp(&b.reward).expect("finite").then(a.seq.cmp(&b.seq)));
    if r.len() <= n {
        return r.into_iter().cloned().collect();
    }
    let m = r.len() - 1;
    let mut picked: Vec<usize> = (0..n).map(|i| (i * m + (n - 1) / 2) / (n - 1).max(1)).collect();
    picked.dedup();
    picked.into_iter().map(|i| r[i].clone()).collect()
}

/// Toy AP on the holdout images after training `rec`'s architecture for
/// `iterations` with its search-time seed. Diverged training scores 0.
pub fn holdout_ap(ctx: &EvalContext, rec: &SearchRecord, iterations: usize) -> Result<f64> {
    let graph = ctx.job_graph(rec.stage, &rec.tokens)?;
    let trained = ctx.train(graph, job_seed(&ctx.plan, rec.seq), iterations)?;
    if trained.diverged {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..ctx.cache.holdout.len()).collect();
    Ok(ctx.score(&trained, ImageSource::Holdout, &idx, true)?.ap.unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub seq: u64,
    pub stage: StageKind,
    pub tokens: Vec<usize>,
    pub reward: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub iterations: usize,
    pub points: Vec<CorrelationPoint>,
    pub rho: f64,
}

/// Re-trains `n` architectures spanning the reward range for a long
/// budget and correlates their proxy rewards with holdout AP. Head records
/// need `ctx` to carry the pyramid they were searched on.
pub fn correlation_study(
    ctx: &EvalContext,
    records: &[SearchRecord],
    stage: StageKind,
    n: usize,
    iterations: usize,
) -> Result<CorrelationReport> {
    let sample = spanning_sample(records, stage, n);
    if sample.len() < 2 {
        return Err(Error::Plan(format!("need at least 2 finite {stage:?} records to correlate")));
    }
    let points = sample
        .into_iter()
        .map(|r| {
            Ok(CorrelationPoint {
                ap: holdout_ap(ctx, &r, iterations)?,
                seq: r.seq,
                stage: r.stage,
                reward: r.reward.expect("sampled records are finite"),
                tokens: r.tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = points.iter().map(|p| p.reward).collect();
    let aps: Vec<f64> = points.iter().map(|p| p.ap).collect();
    Ok(CorrelationReport {
        iterations,
        rho: spearman(&rewards, &aps),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub reward: f64,
    pub holdout_ap: f64,
}

/// Original decoder against the same decoder with every FPN 3x3 conv
/// made deformable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformBaseline {
    pub original: BaselineScore,
    pub deformable: BaselineScore,
}

pub fn deform_baseline(ctx: &EvalContext, iterations: usize, seed: u64) -> Result<DeformBaseline> {
    let specs = ctx.cache.backbone.feature_specs(ctx.plan.dataset.image_size);
    let run = |fpn: FpnKind| -> Result<BaselineScore> {
        let graph = compile_parts(fpn, HeadKind::Original, specs, ctx.plan.decoder_options(ctx.plan.decoder.fpn_width))?;
        let trained = ctx.train(graph, seed, iterations)?;
        if trained.diverged {
            return Err(Error::Diverged(format!("{fpn:?} baseline diverged")));
        }
        let val = ctx.score(&trained, ImageSource::Data, &ctx.cache.split.val, false)?;
        let idx: Vec<usize> = (0..ctx.cache.holdout.len()).collect();
        let hold = ctx.score(&trained, ImageSource::Holdout, &idx, true)?;
        Ok(BaselineScore {
            reward: val.neg_loss(),
            holdout_ap: hold.ap.unwrap_or(0.0),
        })
    };
    Ok(DeformBaseline {
        original: run(FpnKind::Original)?,
        deformable: run(FpnKind::Deformable)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub space: SearchSpace,
    pub reward: RewardMode,
    pub records: usize,
    /// Mean search reward of the final stage's top-k.
    pub top_reward: f64,
    /// Holdout AP of each top-k architecture after proxy training.
    pub top_holdout_ap: Vec<f64>,
    pub mean_top_holdout_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub deform: Option<DeformBaseline>,
}

pub fn variant_label(space: SearchSpace, reward: RewardMode) -> String {
    let s = match space {
        SearchSpace::F => "f",
        SearchSpace::H => "h",
        SearchSpace::Fh => "fh",
    };
    let r = match reward {
        RewardMode::NegLoss => "negloss",
        RewardMode::ToyAp => "toyap",
    };
    format!("{s}-{r}")
}

/// Runs one search per variant under equal budgets (the base plan's arch
/// counts), logging to `out_dir/<variant>.jsonl`, and scores each run's
/// top `top_k` on the holdout images.
pub fn run_ablation(
    base: &SearchPlan,
    cache: Arc<FeatureCache>,
    variants: &[(SearchSpace, RewardMode)],
    out_dir: &Path,
    threads: usize,
    top: usize,
) -> Result<Vec<AblationRun>> {
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for &(space, reward) in variants {
        let mut plan = base.clone();
        plan.search.space = space;
        plan.search.reward = reward;
        let label = variant_label(space, reward);
        let mut eval = LocalEvaluator::new(plan.clone(), cache.clone(), threads);
        let outcome = Search::new(&plan, SearchPaths::new(out_dir.join(format!("{label}.jsonl"))), &mut eval).run()?;
        let stage = match space {
            SearchSpace::F => StageKind::Fpn,
            _ => StageKind::Head,
        };
        let best = top_k(&outcome.records, stage, top);
        let ctx = eval.context(outcome.pyramid.as_ref())?;
        let aps = best
            .iter()
            .map(|r| holdout_ap(ctx, r, plan.proxy.iterations))
            .collect::<Result<Vec<_>>>()?;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let top_rewards: Vec<f64> = best.iter().filter_map(|r| r.reward).collect();
        runs.push(AblationRun {
            label,
            space,
            reward,
            records: outcome.records.len(),
            top_reward: mean(&top_rewards),
            mean_top_holdout_ap: mean(&aps),
            top_holdout_ap: aps,
        });
    }
    Ok(runs)
}

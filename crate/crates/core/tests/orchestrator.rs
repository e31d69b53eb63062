mod common;

use std::sync::Arc;
use std::time::Instant;

use common::tiny_plan;
use nfcs::decoder_graph::{compile_parts, original_fcos_decoder, FpnKind, HeadKind};
use nfcs::orchestrator::cache::cache_key;
use nfcs::orchestrator::*;
use nfcs::search_space::{action_space, sample_tokens, HeadConfig, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn context(plan: &SearchPlan, root: &std::path::Path) -> EvalContext {
    let (cache, _) = FeatureCache::prepare(plan, root).unwrap();
    EvalContext::new(plan.clone(), Arc::new(cache))
}

#[test]
fn plan_files_parse() {
    let toy = common::toy_plan();
    assert_eq!(toy.dataset.n_images, 1000);
    let text = toy.to_toml().unwrap();
    assert_eq!(SearchPlan::from_toml(&text).unwrap(), toy);
    assert!(matches!(SearchPlan::from_toml("[proxy]\nbogus = 1\n"), Err(nfcs::Error::Toml(_))));
    assert!(matches!(SearchPlan::from_toml("[dataset]\nsplit = 1.5\n"), Err(nfcs::Error::Plan(_))));
    assert_ne!(tiny_plan(0).hash(), tiny_plan(1).hash());
}

#[test]
fn cache_is_reused_and_keyed() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(0);
    let (a, hit) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    assert!(!hit);
    let (b, hit) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    assert!(hit);
    assert_eq!(a.backbone_hash, b.backbone_hash);
    assert_eq!(a.features, b.features);
    assert_eq!(a.split, b.split);
    assert_ne!(cache_key(&plan), cache_key(&tiny_plan(1)));
    // proxy-only changes keep the key
    let mut p2 = plan.clone();
    p2.proxy.iterations = 99;
    assert_eq!(cache_key(&plan), cache_key(&p2));

    assert!(matches!(FeatureCache::open(&tiny_plan(5), dir.path()), Err(nfcs::Error::MissingCache(_))));
    std::fs::write(a.dir.join("backbone.nfcs"), b"junk").unwrap();
    assert!(matches!(FeatureCache::open(&plan, dir.path()), Err(nfcs::Error::MissingCache(_))));
}

#[test]
fn split_is_disjoint_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(2);
    let (c, _) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    let (tr, va) = plan.split_sizes();
    assert_eq!((c.split.train.len(), c.split.val.len()), (tr, va));
    let mut all: Vec<usize> = c.split.train.iter().chain(&c.split.val).copied().collect();
    all.sort();
    assert_eq!(all, (0..plan.dataset.n_images).collect::<Vec<_>>());
}

#[test]
fn default_backbone_feature_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = SearchPlan::default();
    plan.dataset.n_images = 6;
    plan.dataset.holdout_images = 2;
    plan.backbone.iterations = 1;
    plan.backbone.batch_size = 2;
    let (c, _) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    let shapes: Vec<Vec<usize>> = c.features[0].iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![64, 16, 16], vec![128, 8, 8], vec![128, 4, 4]]);
}

/// Cached features against recomputing the frozen backbone per batch.
#[test]
fn cached_features_match_live_backbone() {
    let dir = tempfile::tempdir().unwrap();
    // backbone-dominated compute, as with a real feature extractor
    let mut plan = tiny_plan(3);
    plan.dataset.image_size = 128;
    plan.backbone.widths = [64, 128, 256, 256];
    plan.proxy.iterations = 20;
    let mut ctx = context(&plan, dir.path());
    let graph = || original_fcos_decoder(ctx_specs(&plan), plan.decoder_options(plan.decoder.fpn_width)).unwrap();
    let idx = ctx.cache.split.val.clone();

    let t = Instant::now();
    let cached = ctx.train(graph(), 9, plan.proxy.iterations).unwrap();
    let cached_time = t.elapsed();
    let cached_score = ctx.score(&cached, ImageSource::Data, &idx, false).unwrap();
    ctx.live_backbone = true;
    let t = Instant::now();
    let live = ctx.train(graph(), 9, plan.proxy.iterations).unwrap();
    let live_time = t.elapsed();
    let live_score = ctx.score(&live, ImageSource::Data, &idx, false).unwrap();

    for (a, b) in cached.losses.iter().zip(&live.losses) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }
    let (a, b) = (cached_score.neg_loss(), live_score.neg_loss());
    assert!((a - b).abs() <= 1e-5 * a.abs(), "{a} vs {b}");
    assert!(
        live_time.as_secs_f64() >= 3.0 * cached_time.as_secs_f64(),
        "live {live_time:?} cached {cached_time:?}"
    );
}

fn ctx_specs(plan: &SearchPlan) -> [nfcs::decoder_graph::FeatureSpec; 3] {
    nfcs::orchestrator::backbone::Backbone::new(plan.backbone.widths).feature_specs(plan.dataset.image_size)
}

#[test]
fn evaluation_is_deterministic_and_nonpositive() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(4);
    let ctx = context(&plan, dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (id, stage) in [(0, StageKind::Fpn), (1, StageKind::Head)] {
        let space = action_space(if stage == StageKind::Fpn { Stage::FpnOnly } else { Stage::HeadOnly });
        let job = EvalJob {
            id,
            stage,
            tokens: sample_tokens(&space, &mut rng),
            seed: 17,
        };
        let (mut a, mut b) = (ctx.evaluate(&job), ctx.evaluate(&job));
        a.wall_ms = 0.0;
        b.wall_ms = 0.0;
        assert_eq!(a, b);
        assert_eq!(a.status, EvalStatus::Ok);
        assert!(a.reward.unwrap() <= 0.0);
        let ap = a.ap.unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
}

#[test]
fn head_stage_never_runs_the_fpn() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(5);
    let mut ctx = context(&plan, dir.path());
    let pyr = ctx.prefetch_pyramid(FpnKind::Original, 3).unwrap();
    assert_eq!(pyr.data.len(), plan.dataset.n_images);
    assert_eq!(pyr.holdout.len(), plan.dataset.holdout_images);
    ctx.pyramid = Some(Arc::new(pyr));
    let before = ctx.fpn_forward_count();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in 0..3 {
        let out = ctx.evaluate(&EvalJob {
            id,
            stage: StageKind::Head,
            tokens: sample_tokens(&action_space(Stage::HeadOnly), &mut rng),
            seed: id,
        });
        assert_eq!(out.status, EvalStatus::Ok);
    }
    assert_eq!(ctx.fpn_forward_count(), before);

    // the same head on live FPN features scores the same up to float noise
    let head = HeadConfig::reference_searched();
    let opts = plan.decoder_options(plan.decoder.head_width);
    let g = compile_parts(FpnKind::Original, HeadKind::Searched(head), ctx_specs(&plan), opts).unwrap();
    let cached = ctx.train(g.clone(), 1, 5).unwrap();
    assert_eq!(ctx.fpn_forward_count(), before);
    assert!(cached.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn original_decoder_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(6);
    plan.proxy.lr = 3e-3;
    let ctx = context(&plan, dir.path());
    let g = original_fcos_decoder(ctx_specs(&plan), plan.decoder_options(plan.decoder.fpn_width)).unwrap();
    let t = ctx.train(g, 0, 150).unwrap();
    let head: f64 = t.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = t.losses[140..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "first {head:.3} last {tail:.3}");
}

mod common;

use std::path::Path;
use std::sync::Arc;

use common::tiny_plan;
use nfcs::orchestrator::report::write_report;
use nfcs::orchestrator::search::{moving_average, ranks, read_log_lines, read_records, sign_test, spearman, LogLine};
use nfcs::orchestrator::*;
use proptest::prelude::*;

fn run(plan: &SearchPlan, cache: &Arc<FeatureCache>, log: &Path, limit: Option<usize>) -> SearchOutcome {
    let mut ev = LocalEvaluator::new(plan.clone(), cache.clone(), 1);
    let mut s = Search::new(plan, SearchPaths::new(log), &mut ev);
    s.batch_limit = limit;
    s.run().unwrap()
}

fn setup(seed: u64) -> (tempfile::TempDir, SearchPlan, Arc<FeatureCache>) {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(seed);
    let (cache, _) = FeatureCache::prepare(&plan, &dir.path().join("cache")).unwrap();
    (dir, plan, Arc::new(cache))
}

#[test]
fn logs_are_byte_identical_and_resumable() {
    let (dir, plan, cache) = setup(0);
    let a = dir.path().join("a.jsonl");
    let out = run(&plan, &cache, &a, None);
    assert_eq!(out.records.len(), 30);
    let seqs: Vec<u64> = out.records.iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (0..30).collect::<Vec<_>>());
    assert!(out.records[..20].iter().all(|r| r.stage == StageKind::Fpn && r.tokens.len() == 35));
    assert!(out.records[20..].iter().all(|r| r.stage == StageKind::Head && r.tokens.len() == 7));
    let best = top_k(&out.records, StageKind::Fpn, 1).remove(0);
    assert_eq!(out.pyramid.as_ref().unwrap().fpn_tokens.as_ref(), Some(&best.tokens));
    assert_eq!(out.top_fpn.len(), plan.search.top_k_fpn);
    assert_eq!(out.top_head.len(), plan.search.top_k_head);

    let b = dir.path().join("b.jsonl");
    run(&plan, &cache, &b, None);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // interrupted twice, once with the controller checkpoint lost and once
    // with a torn batch at the end of the log
    let c = dir.path().join("c.jsonl");
    run(&plan, &cache, &c, Some(3));
    assert_eq!(read_records(&c).unwrap().len(), 15);
    std::fs::remove_file(SearchPaths::new(&c).checkpoint(StageKind::Fpn)).unwrap();
    run(&plan, &cache, &c, Some(2));
    let full = std::fs::read_to_string(&a).unwrap();
    let mut partial: String = full.lines().take(2 + 20 + 1 + 2).map(|l| format!("{l}\n")).collect();
    partial.push_str("{\"kind\":\"rec");
    assert_eq!(read_records(&c).unwrap().len(), 25);
    std::fs::write(&c, &partial).unwrap();
    run(&plan, &cache, &c, None);
    assert_eq!(std::fs::read_to_string(&c).unwrap(), full);
    let times = std::fs::read_to_string(SearchPaths::new(&c).times()).unwrap();
    assert_eq!(times.lines().count(), 30);

    // finished logs resume to a no-op
    run(&plan, &cache, &c, None);
    assert_eq!(std::fs::read_to_string(&c).unwrap(), full);
}

#[test]
fn log_of_another_plan_is_refused() {
    let (dir, plan, cache) = setup(1);
    let log = dir.path().join("x.jsonl");
    let mut p = plan.clone();
    p.search.space = SearchSpace::F;
    p.search.fpn_archs = 5;
    run(&p, &cache, &log, None);
    let mut ev = LocalEvaluator::new(plan.clone(), cache.clone(), 1);
    let err = Search::new(&plan, SearchPaths::new(&log), &mut ev).run().err().unwrap();
    assert!(matches!(err, nfcs::Error::Plan(_)));
}

#[test]
fn single_stage_spaces_only_touch_their_tokens() {
    let (dir, plan, cache) = setup(2);
    let mut f = plan.clone();
    f.search.space = SearchSpace::F;
    let out = run(&f, &cache, &dir.path().join("f.jsonl"), None);
    assert_eq!(out.records.len(), 20);
    assert!(out.records.iter().all(|r| r.stage == StageKind::Fpn && r.tokens.len() == 35));
    assert!(out.pyramid.is_none());

    let mut h = plan.clone();
    h.search.space = SearchSpace::H;
    let out = run(&h, &cache, &dir.path().join("h.jsonl"), None);
    assert_eq!(out.records.len(), 10);
    assert!(out.records.iter().all(|r| r.stage == StageKind::Head && r.tokens.len() == 7));
    assert_eq!(out.pyramid.unwrap().fpn_tokens, None);
    // every head sits on the same original FPN
    let fpn = out.records[0].cost.fpn_macs;
    assert!(out.records.iter().all(|r| r.cost.fpn_macs == fpn));
}

#[test]
fn random_search_matches_its_seeded_stream() {
    let (dir, plan, cache) = setup(3);
    let mut p = plan.clone();
    p.search.space = SearchSpace::H;
    p.search.random = true;
    let a = run(&p, &cache, &dir.path().join("r1.jsonl"), None);
    let b = run(&p, &cache, &dir.path().join("r2.jsonl"), None);
    assert_eq!(a.records, b.records);
    assert!(!SearchPaths::new(dir.path().join("r1.jsonl")).checkpoint(StageKind::Head).exists());
}

#[test]
fn report_files_are_written() {
    let (dir, plan, cache) = setup(4);
    let log = dir.path().join("s.jsonl");
    run(&plan, &cache, &log, None);
    let out = dir.path().join("report");
    let summary = write_report(&log, &out).unwrap();
    assert_eq!(summary.records, 30);
    for f in ["records.csv", "reward_trend.svg", "sharing.csv", "sharing_trend.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

/// `data/example-search.jsonl` is a 500-architecture head search under
/// `plans/toy.toml` at seed 0.
#[test]
fn shipped_example_log_trends_up() {
    let dir = tempfile::tempdir().unwrap();
    let log = common::workspace_root().join("data/example-search.jsonl");
    let summary = write_report(&log, dir.path()).unwrap();
    assert_eq!(summary.records, 500);
    let (first, last) = (summary.initial_moving_average.unwrap(), summary.final_moving_average.unwrap());
    assert!(last > first, "moving average {first:.2} -> {last:.2}");
    let svg = std::fs::read_to_string(dir.path().join("reward_trend.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let lines = read_log_lines(&log).unwrap();
    assert!(matches!(&lines[0], LogLine::Header { plan, .. } if plan.search.head_archs == 500));
}

/// Spearman against the closed form for distinct values.
fn spearman_closed_form(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let rank = |v: &[f64], i: usize| v.iter().filter(|&&o| o < v[i]).count() as f64;
    let d2: f64 = (0..x.len()).map(|i| (rank(x, i) - rank(y, i)).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Binomial tail by exact integer coefficients.
fn sign_tail(wins: usize, n: usize) -> f64 {
    let mut c = 1u128;
    let mut total = 0u128;
    for k in 0..=n {
        if k >= wins {
            total += c;
        }
        c = c * (n - k) as u128 / (k + 1) as u128;
    }
    total as f64 / 2f64.powi(n as i32)
}

#[test]
fn sign_test_known_values() {
    let t = sign_test(&[0.0; 10], &[1.0; 10]);
    assert_eq!((t.wins, t.losses), (10, 0));
    assert!((t.p_value - 1.0 / 1024.0).abs() < 1e-15);
    let t = sign_test(&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]);
    assert_eq!((t.wins, t.losses), (1, 1));
    assert!((t.p_value - 0.75).abs() < 1e-12);
}

#[test]
fn moving_average_and_ranks() {
    assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
    assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn spearman_matches_closed_form(pairs in prop::collection::hash_set(0u32..10_000, 3..40), perm_seed in any::<u64>()) {
        let x: Vec<f64> = pairs.iter().map(|&v| v as f64).collect();
        let mut y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 7.0 + ((perm_seed >> (i % 60)) & 7) as f64 * 1e4) + i as f64 * 1e-3).collect();
        y.reverse();
        prop_assert!((spearman(&x, &y) - spearman_closed_form(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn sign_test_matches_exact_tail(a in prop::collection::vec(-5i32..5, 1..60), b in prop::collection::vec(-5i32..5, 1..60)) {
        let n = a.len().min(b.len());
        let (a, b): (Vec<f64>, Vec<f64>) = (a[..n].iter().map(|&v| v as f64).collect(), b[..n].iter().map(|&v| v as f64).collect());
        let t = sign_test(&a, &b);
        prop_assert!((t.p_value - sign_tail(t.wins, t.wins + t.losses)).abs() < 1e-12);
    }

    #[test]
    fn moving_average_matches_windows(xs in prop::collection::vec(-100.0f64..100.0, 1..80), w in 1usize..20) {
        let m = moving_average(&xs, w);
        for i in 0..xs.len() {
            let lo = (i + 1).saturating_sub(w);
            let want = xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            prop_assert!((m[i] - want).abs() < 1e-9);
        }
    }
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset. Set
//! `NFCS_ACCEPTANCE_DIR` to keep search logs (reruns then resume them);
//! otherwise they go to a temporary directory. Feature caches are kept
//! under the cargo target directory.

mod common;

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{check_graph_invariants, landscape_run, mean, median, random_landscape, recount, spawn_workers};
use nfcs::controller::PolicyConfig;
use nfcs::cost::cost;
use nfcs::decoder_graph::{compile, compile_parts, original_fcos_decoder, DecoderOptions, FeatureSpec, FpnKind, HeadKind};
use nfcs::dispatcher::{Coordinator, CoordinatorConfig, WorkerOptions};
use nfcs::orchestrator::experiments::{correlation_study, run_ablation};
use nfcs::orchestrator::search::{read_records, reward_trend};
use nfcs::orchestrator::*;
use nfcs::search_space::*;
use nfcs_tensor::{polyak_update, Adam, AdamConfig, ParamStore, Tensor};
use num_bigint::BigUint;

type Check = Result<String, String>;

struct Env {
    work: PathBuf,
    cache: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    threads: usize,
}

impl Env {
    fn new() -> Self {
        let (work, tmp) = match std::env::var_os("NFCS_ACCEPTANCE_DIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir().expect("temp dir");
                (t.path().to_path_buf(), Some(t))
            }
        };
        std::fs::create_dir_all(&work).expect("work dir");
        Self {
            work,
            cache: Path::new(env!("CARGO_TARGET_TMPDIR")).join("nfcs-acceptance-cache"),
            _tmp: tmp,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }

    fn feature_cache(&self, plan: &SearchPlan) -> Arc<FeatureCache> {
        Arc::new(FeatureCache::prepare(plan, &self.cache).expect("feature cache").0)
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Instant, what: &str) -> Result<(), String> {
    check(t.elapsed() < limit, || format!("{what} took {:.0}s, limit {}s", t.elapsed().as_secs_f64(), limit.as_secs()))
}

fn c1_gradients(_: &Env) -> Check {
    let t = Instant::now();
    let suite = nfcs_tensor::gradcheck::run_suite(20).map_err(|e| e.to_string())?;
    let worst = suite.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("ops");
    for e in &suite {
        check(e.cases >= 20, || format!("{} ran {} cases", e.op, e.cases))?;
        check(e.worst < 1e-4, || format!("{} relative error {:.3e}", e.op, e.worst))?;
    }
    // the deformable case differentiates input, offsets, weight and bias
    check(suite.iter().any(|e| e.op == "deform_conv2d"), || "suite lacks deform_conv2d".into())?;
    within(Duration::from_secs(300), t, "gradient suite")?;
    Ok(format!("{} ops x 20 cases, worst {:.2e} ({})", suite.len(), worst.worst, worst.op))
}

fn c2_cardinality(_: &Env) -> Check {
    let t = Instant::now();
    let head = space_size(Stage::HeadOnly);
    check(head == BigUint::from(823_543u32), || format!("head space {head}"))?;
    let ops = 2usize;
    let mut seen = std::collections::HashSet::new();
    for a in 0..pool_size(1).pow(2) {
        for o in 0..ops.pow(2) {
            for b in 0..pool_size(2).pow(2) {
                for p in 0..ops.pow(2) {
                    seen.insert((a, o, b, p));
                }
            }
        }
    }
    let mut vocab = Vec::new();
    for t in 1..=2 {
        vocab.extend([pool_size(t), pool_size(t), ops, ops, 1]);
    }
    let reduced = ActionSpace::custom(vocab).size();
    check(reduced == BigUint::from(seen.len()), || format!("reduced space {reduced} vs {} enumerated", seen.len()))?;
    within(Duration::from_secs(60), t, "cardinality")?;
    Ok(format!("head {head}, reduced FPN {reduced} = enumeration"))
}

fn c3_fuzz(_: &Env) -> Check {
    let mut failures = Vec::new();
    for seed in 0..1000u64 {
        if let Err(e) = check_graph_invariants(&sample_uniform(seed)) {
            failures.push(format!("seed {seed}: {e}"));
        }
    }
    check(failures.is_empty(), || format!("{} failures, first {}", failures.len(), failures[0]))?;
    Ok("1000 configs, 0 failures".into())
}

fn c4_cost(_: &Env) -> Check {
    for seed in 0..20u64 {
        let (h, w) = [(64, 64), (96, 160), (100, 136), (128, 72)][seed as usize % 4];
        let mut opts = DecoderOptions::new(16, 24, 3);
        opts.groups = 4;
        let g = compile(&sample_uniform(1000 + seed), FeatureSpec::inputs_for(h, w, [24, 40, 64]), opts)
            .map_err(|e| e.to_string())?;
        let r = cost(&g, (h, w));
        let got = (r.fpn_macs, r.head_macs, r.fpn_params, r.head_params);
        check(got == recount(&g), || format!("config {seed}: {got:?} vs recount {:?}", recount(&g)))?;
    }
    let inputs = FeatureSpec::inputs_for(800, 1088, [512, 1024, 2048]);
    let opts = DecoderOptions::new(256, 256, 80);
    let orig = cost(&original_fcos_decoder(inputs, opts).map_err(|e| e.to_string())?, (800, 1088));
    let searched = compile_parts(FpnKind::Original, HeadKind::Searched(HeadConfig::reference_searched()), inputs, opts)
        .map_err(|e| e.to_string())?;
    let s = cost(&searched, (800, 1088));
    check(s.head_macs < orig.head_macs && s.head_params < orig.head_params, || {
        format!("searched head {}/{} vs original {}/{}", s.head_macs, s.head_params, orig.head_macs, orig.head_params)
    })?;
    Ok(format!(
        "20 recounts exact; head {:.2}G/{:.2}M searched vs {:.2}G/{:.2}M original",
        s.head_macs as f64 / 1e9,
        s.head_params as f64 / 1e6,
        orig.head_macs as f64 / 1e9,
        orig.head_params as f64 / 1e6
    ))
}

fn c5_landscape(_: &Env) -> Check {
    let t = Instant::now();
    let ppo: Vec<f64> = (0..3u64)
        .map(|s| {
            let r = landscape_run(s, 2000, PolicyConfig::default());
            mean(&r[r.len() - 50..])
        })
        .collect();
    let random: Vec<f64> = (0..3u64)
        .map(|s| {
            let r = random_landscape(s, 2000);
            mean(&r[r.len() - 50..])
        })
        .collect();
    let (p, r) = (median(ppo.clone()), median(random.clone()));
    check(p >= 0.95, || format!("PPO last-50 means {ppo:?}"))?;
    check(r < 0.25, || format!("random last-50 means {random:?}"))?;
    within(Duration::from_secs(600), t, "landscape")?;
    Ok(format!("median last-50 PPO {p:.3}, random {r:.3}"))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn toy_search_plan(seed: u64) -> SearchPlan {
    let mut plan = common::toy_plan();
    plan.seed = seed;
    plan.search.space = SearchSpace::H;
    plan.search.head_archs = 500;
    plan
}

fn toy_search(env: &Env, seed: u64) -> Result<(SearchOutcome, LocalEvaluator), String> {
    let plan = toy_search_plan(seed);
    let mut ev = LocalEvaluator::new(plan.clone(), env.feature_cache(&plan), env.threads);
    let log = env.work.join(format!("c6-seed{seed}.jsonl"));
    let out = Search::new(&plan, SearchPaths::new(log), &mut ev).run().map_err(|e| e.to_string())?;
    Ok((out, ev))
}

fn c6_search(env: &Env) -> Check {
    let t = Instant::now();
    let mut diffs = Vec::new();
    let mut pvals = Vec::new();
    for seed in SEEDS {
        let (out, _) = toy_search(env, seed)?;
        check(out.records.len() == 500, || format!("seed {seed}: {} records", out.records.len()))?;
        let trend = reward_trend(&out.records, 50).expect("500 records");
        println!(
            "  seed {seed}: first-50 {:.2} last-50 {:.2} sign {}/{} p={:.2e}",
            trend.first_mean, trend.last_mean, trend.sign.wins, trend.sign.losses, trend.sign.p_value
        );
        diffs.push(trend.last_mean - trend.first_mean);
        pvals.push(trend.sign.p_value);
    }
    let (d, p) = (median(diffs.clone()), median(pvals.clone()));
    check(d > 0.0 && p < 0.05, || format!("median gain {d:.3}, median p {p:.3e}; gains {diffs:?} p {pvals:?}"))?;
    within(Duration::from_secs(8 * 3600), t, "toy searches")?;
    Ok(format!("median last-50 gain {d:.2}, median sign-test p {p:.2e}"))
}

fn c7_correlation(env: &Env) -> Check {
    let (out, mut ev) = toy_search(env, 0)?;
    let long = 5 * ev.context(None).map_err(|e| e.to_string())?.plan.proxy.iterations;
    let ctx = ev.context(out.pyramid.as_ref()).map_err(|e| e.to_string())?;
    let report = correlation_study(ctx, &out.records, StageKind::Head, 15, long).map_err(|e| e.to_string())?;
    nfcs::orchestrator::report::write_correlation(&report, &env.work.join("c7")).map_err(|e| e.to_string())?;
    check(report.points.len() == 15, || format!("{} points", report.points.len()))?;
    check(report.rho > 0.5, || format!("rho {:.3}", report.rho))?;
    Ok(format!("rho {:.3} over 15 archs at {long} iterations", report.rho))
}

fn c8_ablation(env: &Env) -> Check {
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let mut plan = toy_search_plan(seed);
        plan.search.head_archs = 100;
        let runs = run_ablation(
            &plan,
            env.feature_cache(&plan),
            &[(SearchSpace::H, RewardMode::NegLoss), (SearchSpace::H, RewardMode::ToyAp)],
            &env.work.join(format!("c8-seed{seed}")),
            env.threads,
            10,
        )
        .map_err(|e| e.to_string())?;
        let (neg, ap) = (runs[0].mean_top_holdout_ap, runs[1].mean_top_holdout_ap);
        println!("  seed {seed}: top-10 holdout AP negloss {neg:.4} toyap {ap:.4}");
        gaps.push(neg - ap);
    }
    let g = median(gaps.clone());
    check(g >= 0.0, || format!("median AP gap {g:.4}; gaps {gaps:?}"))?;
    Ok(format!("median top-10 AP gap (negloss - toyap) {g:.4}"))
}

fn c9_numerics(_: &Env) -> Check {
    let decay = 0.9;
    let xs = [1.5, -0.25, 3.0, 0.125, -2.0, 7.5];
    let mut avg = ParamStore::new();
    avg.insert("w", Tensor::from_parts(vec![1], vec![xs[0]]));
    for &x in &xs[1..] {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_parts(vec![1], vec![x]));
        polyak_update(&mut avg, &p, decay).map_err(|e| e.to_string())?;
    }
    // a_5 = d^5 x_0 + (1 - d) sum_k d^(5-k) x_k
    let closed = decay.powi(5) * xs[0] + (1..=5).map(|k| (1.0 - decay) * decay.powi(5 - k as i32) * xs[k]).sum::<f64>();
    let ema: f64 = avg.get("w").expect("w").to_vec()[0];
    check((ema - closed).abs() < 1e-12, || format!("EMA {ema} vs {closed}"))?;

    let cfg = AdamConfig::with_lr(0.1);
    let mut params = ParamStore::new();
    params.insert("w", Tensor::from_parts(vec![2], vec![1.0, -2.0]));
    let mut adam = Adam::new(cfg.clone(), &params);
    let grads = [[0.5, -1.0], [0.25, 2.0]];
    for g in grads {
        adam.step(&mut params, &[Tensor::from_parts(vec![2], g.to_vec())]).map_err(|e| e.to_string())?;
    }
    // by hand: step 1 moves each coordinate by -lr * sign(g) up to eps
    let mut want = [1.0f64, -2.0];
    for i in 0..2 {
        let (g1, g2) = (grads[0][i], grads[1][i]);
        let (m1, v1) = ((1.0 - cfg.beta1) * g1, (1.0 - cfg.beta2) * g1 * g1);
        want[i] -= cfg.lr * (m1 / (1.0 - cfg.beta1)) / ((v1 / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        let (m2, v2) = (cfg.beta1 * m1 + (1.0 - cfg.beta1) * g2, cfg.beta2 * v1 + (1.0 - cfg.beta2) * g2 * g2);
        want[i] -= cfg.lr * (m2 / (1.0 - cfg.beta1.powi(2))) / ((v2 / (1.0 - cfg.beta2.powi(2))).sqrt() + cfg.eps);
    }
    let got: Vec<f64> = params.get("w").expect("w").to_vec();
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(err < 1e-10, || format!("Adam {got:?} vs {want:?}"))?;
    Ok(format!("EMA error {:.1e}, Adam error {err:.1e}", (ema - closed).abs()))
}

fn reward_map(log: &Path) -> Result<BTreeMap<Vec<usize>, Option<u64>>, String> {
    Ok(read_records(log)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| (r.tokens, r.reward.map(f64::to_bits)))
        .collect())
}

fn c10_dispatcher(env: &Env) -> Check {
    let mut plan = common::toy_plan();
    plan.search.space = SearchSpace::F;
    plan.search.fpn_archs = 50;
    plan.proxy.iterations = 30;
    let cache = env.feature_cache(&plan);
    let dir = env.work.join("c10");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;

    let local_log = dir.join("local.jsonl");
    let mut ev = LocalEvaluator::new(plan.clone(), cache, 1);
    Search::new(&plan, SearchPaths::new(&local_log), &mut ev).run().map_err(|e| e.to_string())?;

    let remote_log = dir.join("remote.jsonl");
    let config = CoordinatorConfig {
        idle_abort: Duration::from_secs(120),
        ..Default::default()
    };
    let mut coord = Coordinator::bind("127.0.0.1:0", &plan, config).map_err(|e| e.to_string())?;
    let mut opts = vec![WorkerOptions::default(); 4];
    opts[2].vanish_after = Some(4);
    let handles = spawn_workers(coord.local_addr(), &plan, &env.cache, &opts);
    coord.wait_for_workers(4, Duration::from_secs(120)).map_err(|e| e.to_string())?;
    Search::new(&plan, SearchPaths::new(&remote_log), &mut coord).run().map_err(|e| e.to_string())?;
    let reassigned = coord.reassigned;
    drop(coord);
    let answered: Vec<usize> = handles
        .into_iter()
        .map(|h| h.join().expect("worker thread").map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;

    let (a, b) = (reward_map(&local_log)?, reward_map(&remote_log)?);
    check(a.len() == 50 && a == b, || format!("{} local vs {} remote distinct archs, equal {}", a.len(), b.len(), a == b))?;
    check(answered.iter().sum::<usize>() == 50, || format!("workers answered {answered:?}"))?;
    check(reassigned >= 1, || "the vanished worker's job was never reassigned".into())?;
    let same_log = std::fs::read(&local_log).ok() == std::fs::read(&remote_log).ok();
    check(same_log, || "coordinator log differs from in-process log".into())?;
    Ok(format!("50 jobs on 4 workers, answered {answered:?}, {reassigned} reassigned, logs identical"))
}

fn c11_determinism(env: &Env) -> Check {
    let dir = env.work.join("c11");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let plan = common::workspace_root().join("plans/toy.toml");
    let flags = ["--seed", "7", "--fpn-archs", "30", "--head-archs", "20", "--iterations", "60"];
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_nfcs"))
            .arg("--cache-dir")
            .arg(&env.cache)
            .args(args)
            .arg("--plan")
            .arg(&plan)
            .args(flags)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
    };
    run(&["prepare"])?;
    let logs: Vec<PathBuf> = (0..2).map(|i| dir.join(format!("run{i}.jsonl"))).collect();
    for log in &logs {
        run(&["search", "--log", log.to_str().expect("utf-8 path")])?;
    }
    let (a, b) = (std::fs::read(&logs[0]).map_err(|e| e.to_string())?, std::fs::read(&logs[1]).map_err(|e| e.to_string())?);
    check(a == b, || "logs differ".into())?;
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    check(lines == 1 + 2 + 50, || format!("{lines} log lines"))?;
    Ok(format!("two FH searches of 50 archs, {} identical bytes", a.len()))
}

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn(&Env) -> Check); 11] = [
        (1, "gradient suite", c1_gradients),
        (2, "search-space cardinality", c2_cardinality),
        (3, "grammar/graph fuzz", c3_fuzz),
        (4, "cost-model oracle", c4_cost),
        (5, "controller on synthetic landscape", c5_landscape),
        (6, "end-to-end toy search", c6_search),
        (7, "reward-AP correlation", c7_correlation),
        (8, "reward-design ablation", c8_ablation),
        (9, "Polyak/Adam numerics", c9_numerics),
        (10, "dispatcher equivalence", c10_dispatcher),
        (11, "determinism", c11_determinism),
    ];
    let env = Env::new();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| *s == n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(|| run(&env)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.0}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why} [{secs:.0}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

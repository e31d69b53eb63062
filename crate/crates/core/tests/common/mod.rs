//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::PathBuf;

use nfcs::controller::{Policy, PolicyConfig};
use nfcs::orchestrator::SearchPlan;
use nfcs::search_space::{action_space, sample_tokens, OperationKind, Stage, HEAD_LAYERS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_plan() -> SearchPlan {
    SearchPlan::load(&workspace_root().join("plans/toy.toml")).expect("plans/toy.toml")
}

/// Share of DeformConv3x3 among the six head ops of a head token sequence.
pub fn deform_fraction(tokens: &[usize]) -> f64 {
    let id = OperationKind::DeformConv3x3.id();
    tokens[..HEAD_LAYERS].iter().filter(|&&t| t == id).count() as f64 / HEAD_LAYERS as f64
}

/// Rewards of `samples` architectures drawn by a PPO controller on the
/// deformable-fraction landscape, in sampling order.
pub fn landscape_run(seed: u64, samples: usize, config: PolicyConfig) -> Vec<f64> {
    let batch = config.batch_archs;
    let mut policy = Policy::new(action_space(Stage::HeadOnly), config, seed).unwrap();
    let mut rewards = Vec::with_capacity(samples);
    let mut b = 0u64;
    while rewards.len() < samples {
        let mut s = policy.sample(nfcs::seed::derive(seed, b), batch).unwrap();
        let r: Vec<f64> = s.tokens.iter().map(|t| deform_fraction(t)).collect();
        rewards.extend(&r);
        s.set_rewards(r).unwrap();
        policy.ppo_update(&s).unwrap();
        b += 1;
    }
    rewards.truncate(samples);
    rewards
}

pub fn random_landscape(seed: u64, samples: usize) -> Vec<f64> {
    let space = action_space(Stage::HeadOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| deform_fraction(&sample_tokens(&space, &mut rng))).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Seconds-scale plan for integration tests: 64 px images, narrow backbone
/// and decoder, short proxy training.
pub fn tiny_plan(seed: u64) -> SearchPlan {
    let mut p = SearchPlan::default();
    p.seed = seed;
    p.dataset.n_images = 48;
    p.dataset.image_size = 64;
    p.dataset.holdout_images = 16;
    p.backbone.widths = [8, 16, 16, 16];
    p.backbone.iterations = 10;
    p.backbone.batch_size = 4;
    p.proxy.iterations = 12;
    p.proxy.batch_size = 4;
    p.proxy.eval_batch = 16;
    p.decoder.fpn_width = 8;
    p.decoder.head_width = 8;
    p.decoder.groups = 4;
    p.search.fpn_archs = 20;
    p.search.head_archs = 10;
    p.search.top_k_fpn = 5;
    p.search.top_k_head = 3;
    p.controller.batch_archs = 5;
    p
}

/// Spawns loopback workers against `addr`; each handle yields the number
/// of jobs the worker answered.
pub fn spawn_workers(
    addr: std::net::SocketAddr,
    plan: &SearchPlan,
    cache_root: &std::path::Path,
    opts: &[nfcs::dispatcher::WorkerOptions],
) -> Vec<std::thread::JoinHandle<nfcs::Result<usize>>> {
    opts.iter()
        .enumerate()
        .map(|(i, o)| {
            let (plan, root, o) = (plan.clone(), cache_root.to_path_buf(), o.clone());
            std::thread::spawn(move || nfcs::dispatcher::run_worker(&addr.to_string(), &plan, &root, &format!("w{i}"), &o))
        })
        .collect()
}

/// Outcomes without wall time, for comparing runs.
pub fn strip_wall(mut xs: Vec<nfcs::orchestrator::EvalOutcome>) -> Vec<nfcs::orchestrator::EvalOutcome> {
    for x in &mut xs {
        x.wall_ms = 0.0;
    }
    xs
}

fn oracle_dangling(cfg: &nfcs::search_space::FpnConfig) -> Vec<usize> {
    use nfcs::search_space::{NUM_BLOCKS, NUM_INPUTS};
    let mut consumed = [false; NUM_BLOCKS + NUM_INPUTS];
    for b in &cfg.blocks {
        consumed[b.id1] = true;
        consumed[b.id2] = true;
    }
    // a block only sees earlier pool entries, so any consumer is later
    (1..=4).filter(|&t| !consumed[NUM_INPUTS + t - 1]).collect()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Compiles `cfg` on small inputs and checks token round trip, dangling
/// merges, resolution closure and the head weight-sharing partition.
pub fn check_graph_invariants(cfg: &nfcs::search_space::DecoderConfig) -> Result<(), String> {
    use nfcs::decoder_graph::*;
    use nfcs::search_space::*;
    let inputs = FeatureSpec::inputs_for(64, 64, [8, 12, 16]);
    let mut opts = DecoderOptions::new(8, 8, 3);
    opts.groups = 4;
    let tokens = encode(cfg).map_err(|e| e.to_string())?;
    ensure!(decode(&tokens).ok().as_ref() == Some(cfg), "token round trip");
    let g = compile(cfg, inputs, opts).map_err(|e| e.to_string())?;
    ensure!(g == compile(cfg, inputs, opts).unwrap(), "compile is not deterministic");

    let merged: Vec<usize> = g.global_merges.iter().map(|m| m.block).collect();
    ensure!(merged == oracle_dangling(&cfg.fpn), "dangling merges {merged:?}");
    for m in &g.global_merges {
        ensure!(m.source == g.block_outputs[m.block - 1], "merge source of block {}", m.block);
        ensure!(m.targets == [g.pyramid[0], g.pyramid[1], g.pyramid[2]], "merge targets of block {}", m.block);
    }

    let mut stride = vec![8usize, 16, 32];
    for (t, b) in cfg.fpn.blocks.iter().enumerate() {
        let s = stride[b.id1].min(stride[b.id2]);
        ensure!(g.nodes[g.block_outputs[t]].spec.stride == s, "block {} stride", t + 1);
        stride.push(s);
    }
    let p6_chain = [g.pyramid[3], g.pyramid[3] + 1, g.pyramid[4]];
    for (id, n) in g.nodes[..g.head_start].iter().enumerate() {
        if !p6_chain.contains(&id) {
            ensure!([8, 16, 32].contains(&n.spec.stride), "node {id} stride {}", n.spec.stride);
        }
        if matches!(n.op, NodeOp::Add | NodeOp::Concat) {
            for &i in &n.inputs {
                let s = g.nodes[i].spec;
                ensure!(
                    (s.height, s.width, s.stride) == (n.spec.height, n.spec.width, n.spec.stride),
                    "merge node {id} mixes resolutions"
                );
            }
        }
        ensure!(n.inputs.iter().all(|&i| i < id), "node {id} reads a later node");
    }
    let strides: Vec<usize> = g.pyramid.iter().map(|&p| g.nodes[p].spec.stride).collect();
    ensure!(strides == PYRAMID_STRIDES.to_vec(), "pyramid strides {strides:?}");

    let independent = g.head_partition.iter().take_while(|s| !**s).count();
    ensure!(independent == cfg.head.share_from, "partition {:?}", g.head_partition);
    ensure!(g.head_partition[independent..].iter().all(|&s| s), "partition {:?}", g.head_partition);
    for j in 0..HEAD_LAYERS {
        let names = g.head_layer_params(j);
        let per_level = names.iter().filter(|n| n.contains(".lvl")).count();
        if cfg.head.ops[j] == OperationKind::Skip {
            ensure!(names.is_empty(), "skip layer {j} owns params");
        } else if j < cfg.head.share_from {
            ensure!(per_level == names.len() && names.len() % 5 == 0, "layer {j} replicas {names:?}");
        } else {
            ensure!(per_level == 0, "shared layer {j} has per-level params");
        }
    }
    Ok(())
}

/// Recount from parameter shapes and compile-time node shapes rather than
/// the kernel formula the cost model uses.
pub fn recount(g: &nfcs::decoder_graph::DecoderGraph) -> (u64, u64, u64, u64) {
    use nfcs::decoder_graph::{NodeOp, Section};
    let shape = |name: &str| g.params.iter().find(|p| p.name == name).unwrap().shape.clone();
    let (mut fpn, mut head) = (0u64, 0u64);
    for n in &g.nodes {
        let hw = (n.spec.height * n.spec.width) as u64;
        let elems = n.spec.channels as u64 * hw;
        let macs = match &n.op {
            NodeOp::Conv { param, .. } => shape(&format!("{param}.w")).iter().product::<usize>() as u64 * hw,
            NodeOp::DeformConv { param } => {
                let w = shape(&format!("{param}.w"));
                w.iter().product::<usize>() as u64 * hw + 36 * w[1] as u64 * hw
            }
            NodeOp::Norm { .. } | NodeOp::Relu => 2 * elems,
            NodeOp::Resize => 4 * elems,
            NodeOp::Add => (n.inputs.len() as u64 - 1) * elems,
            NodeOp::Input { .. } | NodeOp::Concat => 0,
        };
        match n.section {
            Section::Fpn => fpn += macs,
            Section::Head(_) => head += macs,
        }
    }
    let params = |prefix: &str| -> u64 {
        g.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.numel() as u64).sum()
    };
    (fpn, head, params("fpn."), params("head."))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nfcs::cost::cost;
use nfcs::decoder_graph::{compile, original_fcos_decoder, DecoderOptions, FeatureSpec};
use nfcs::dispatcher::{run_worker, Coordinator, CoordinatorConfig, WorkerOptions};
use nfcs::orchestrator::experiments::{correlation_study, deform_baseline, run_ablation, variant_label, AblationReport};
use nfcs::orchestrator::report::{write_correlation, write_report};
use nfcs::orchestrator::search::read_log_lines;
use nfcs::orchestrator::{
    EvalJob, Evaluator, FeatureCache, LocalEvaluator, LogLine, RewardMode, Search, SearchPaths, SearchPlan,
    SearchSpace, StageKind,
};
use nfcs::search_space::{decode, TOTAL_TOKENS};
use nfcs::{Error, Result};

#[derive(Parser)]
#[command(name = "nfcs", version, about = "Search detection decoders with a PPO controller on a synthetic proxy task")]
struct Cli {
    /// Directory holding datasets, backbones and feature caches.
    #[arg(long, global = true, env = "NFCS_CACHE_DIR", default_value = ".nfcs-cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Plan file (TOML, or JSON by extension). Defaults apply without one.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Proxy training iterations per architecture.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    fpn_archs: Option<usize>,
    #[arg(long)]
    head_archs: Option<usize>,
    #[arg(long, value_enum)]
    space: Option<SpaceArg>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// Sample architectures uniformly instead of from the controller.
    #[arg(long)]
    random: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    F,
    H,
    Fh,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    NegLoss,
    ToyAp,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Fpn,
    Head,
}

impl From<StageArg> for StageKind {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Fpn => StageKind::Fpn,
            StageArg::Head => StageKind::Head,
        }
    }
}

impl PlanArgs {
    fn load(&self) -> Result<SearchPlan> {
        let mut plan = match &self.plan {
            Some(p) => SearchPlan::load(p)?,
            None => SearchPlan::default(),
        };
        if let Some(s) = self.seed {
            plan.seed = s;
        }
        if let Some(i) = self.iterations {
            plan.proxy.iterations = i;
        }
        if let Some(n) = self.fpn_archs {
            plan.search.fpn_archs = n;
        }
        if let Some(n) = self.head_archs {
            plan.search.head_archs = n;
        }
        if let Some(s) = self.space {
            plan.search.space = match s {
                SpaceArg::F => SearchSpace::F,
                SpaceArg::H => SearchSpace::H,
                SpaceArg::Fh => SearchSpace::Fh,
            };
        }
        if let Some(r) = self.reward {
            plan.search.reward = match r {
                RewardArg::NegLoss => RewardMode::NegLoss,
                RewardArg::ToyAp => RewardMode::ToyAp,
            };
        }
        plan.search.random |= self.random;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset, train the backbone and cache its features.
    Prepare {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Run the progressive search, appending to (or resuming) a JSONL log.
    Search {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        log: PathBuf,
        /// Local evaluation threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Farm jobs out to workers connecting to this address instead.
        #[arg(long)]
        serve: Option<String>,
        /// Workers to wait for before starting when serving.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate one token sequence on the proxy task.
    EvalArch {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Tokens separated by commas or spaces.
        #[arg(long)]
        tokens: String,
        /// Job seed; defaults to the plan seed.
        #[arg(long)]
        job_seed: Option<u64>,
    },
    /// Print MACs and parameters of a decoder.
    Cost {
        /// 42 tokens separated by commas or spaces.
        #[arg(long, required_unless_present = "original")]
        tokens: Option<String>,
        /// The hand-designed decoder instead of tokens.
        #[arg(long)]
        original: bool,
        /// Input size as HxW.
        #[arg(long, default_value = "1088x800")]
        hw: String,
        /// Channels of c3, c4, c5.
        #[arg(long, default_value = "512,1024,2048")]
        inputs: String,
        #[arg(long, default_value_t = 256)]
        fpn_width: usize,
        #[arg(long, default_value_t = 256)]
        head_width: usize,
        #[arg(long, default_value_t = 80)]
        classes: usize,
        /// Per-layer rows as CSV instead of totals.
        #[arg(long)]
        csv: bool,
    },
    /// Write CSV and SVG summaries of a search log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Correlate proxy rewards with holdout AP after long training.
    Correlate {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "fpn")]
        stage: StageArg,
        #[arg(long, default_value_t = 15)]
        n: usize,
        /// Long training budget.
        #[arg(long, default_value_t = 1500)]
        long_iterations: usize,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Reward-mode and search-space ablations plus the deformable FPN baseline.
    Ablate {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Variants as space-reward pairs, e.g. fh-negloss,fh-toyap.
        #[arg(long, default_value = "fh-negloss,fh-toyap,f-negloss,h-negloss")]
        variants: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip the deformable FPN baseline.
        #[arg(long)]
        no_deform: bool,
    },
    /// Serve jobs for a coordinator.
    Worker {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        connect: String,
        #[arg(long, default_value = "worker")]
        name: String,
    },
}

fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("token `{s}` is not a non-negative integer")))
        })
        .collect()
}

fn parse_pair(text: &str, sep: char) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("expected two integers as A{sep}B, got `{text}`"));
    let (a, b) = text.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn open_cache(plan: &SearchPlan, root: &Path) -> Result<Arc<FeatureCache>> {
    Ok(Arc::new(FeatureCache::open(plan, root)?))
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.cache_dir;
    match cli.command {
        Command::Prepare { plan } => {
            let plan = plan.load()?;
            let (cache, hit) = FeatureCache::prepare(&plan, &root)?;
            println!(
                "{} cache {} at {} ({} images, backbone {})",
                if hit { "reused" } else { "built" },
                cache.key,
                cache.dir.display(),
                cache.data.len(),
                cache.backbone_hash
            );
        }
        Command::Search {
            plan,
            log,
            jobs,
            serve,
            workers,
        } => {
            let plan = plan.load()?;
            let outcome = match serve {
                Some(addr) => {
                    let mut coord = Coordinator::bind(addr.as_str(), &plan, CoordinatorConfig::default())?;
                    eprintln!("listening on {}, waiting for {workers} worker(s)", coord.local_addr());
                    coord.wait_for_workers(workers, Duration::from_secs(600))?;
                    Search::new(&plan, SearchPaths::new(&log), &mut coord).run()?
                }
                None => {
                    let mut eval = LocalEvaluator::new(plan.clone(), open_cache(&plan, &root)?, jobs);
                    Search::new(&plan, SearchPaths::new(&log), &mut eval).run()?
                }
            };
            for (label, top) in [("fpn", &outcome.top_fpn), ("head", &outcome.top_head)] {
                if let Some(best) = top.first() {
                    println!(
                        "best {label}: seq {} reward {:.4} tokens {:?}",
                        best.seq,
                        best.reward.unwrap_or(f64::NAN),
                        best.tokens
                    );
                }
            }
            println!("{} records in {}", outcome.records.len(), log.display());
        }
        Command::EvalArch {
            plan,
            stage,
            tokens,
            job_seed,
        } => {
            let plan = plan.load()?;
            let tokens = parse_tokens(&tokens)?;
            let mut eval = LocalEvaluator::new(plan.clone(), open_cache(&plan, &root)?, 1);
            let job = EvalJob {
                id: 0,
                stage: stage.into(),
                tokens,
                seed: job_seed.unwrap_or(plan.seed),
            };
            let out = eval.evaluate(std::slice::from_ref(&job), None)?;
            let mut out = out.into_iter().next().expect("one outcome");
            out.wall_ms = 0.0;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Cost {
            tokens,
            original,
            hw,
            inputs,
            fpn_width,
            head_width,
            classes,
            csv,
        } => {
            let (h, w) = parse_pair(&hw, 'x')?;
            let ch: Vec<usize> = parse_tokens(&inputs)?;
            if ch.len() != 3 {
                return Err(Error::InvalidConfig(format!("--inputs needs 3 channel counts, got {}", ch.len())));
            }
            let specs = FeatureSpec::inputs_for(h, w, [ch[0], ch[1], ch[2]]);
            let opts = DecoderOptions::new(fpn_width, head_width, classes);
            let graph = if original {
                original_fcos_decoder(specs, opts)?
            } else {
                let t = parse_tokens(tokens.as_deref().unwrap_or_default())?;
                if t.len() != TOTAL_TOKENS {
                    return Err(Error::TokenLength {
                        expected: TOTAL_TOKENS,
                        got: t.len(),
                    });
                }
                compile(&decode(&t)?, specs, opts)?
            };
            let report = cost(&graph, (h, w));
            if csv {
                print!("{}", report.to_csv());
            } else {
                println!("{}", report.summary());
            }
        }
        Command::Report { log, out } => {
            let summary = write_report(&log, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Correlate {
            plan,
            log,
            stage,
            n,
            long_iterations,
            out,
        } => {
            let plan = plan.load()?;
            let lines = read_log_lines(&log)?;
            let records: Vec<_> = lines
                .iter()
                .filter_map(|l| match l {
                    LogLine::Record(r) => Some(r.clone()),
                    _ => None,
                })
                .collect();
            let stage: StageKind = stage.into();
            let pyramid = lines.iter().find_map(|l| match l {
                LogLine::Stage { stage: s, pyramid, .. } if *s == stage => pyramid.clone(),
                _ => None,
            });
            let mut eval = LocalEvaluator::new(plan.clone(), open_cache(&plan, &root)?, 1);
            let ctx = eval.context(pyramid.as_ref())?;
            let report = correlation_study(ctx, &records, stage, n, long_iterations)?;
            write_correlation(&report, &out)?;
            println!("spearman rho = {:.4} over {} architectures", report.rho, report.points.len());
        }
        Command::Ablate {
            plan,
            out,
            variants,
            top,
            jobs,
            no_deform,
        } => {
            let plan = plan.load()?;
            let cache = open_cache(&plan, &root)?;
            let mut pairs = Vec::new();
            for v in variants.split(',').filter(|s| !s.is_empty()) {
                let (s, r) = v
                    .split_once('-')
                    .ok_or_else(|| Error::InvalidConfig(format!("variant `{v}` is not space-reward")))?;
                let space = match s {
                    "f" => SearchSpace::F,
                    "h" => SearchSpace::H,
                    "fh" => SearchSpace::Fh,
                    _ => return Err(Error::InvalidConfig(format!("unknown space `{s}`"))),
                };
                let reward = match r {
                    "negloss" => RewardMode::NegLoss,
                    "toyap" => RewardMode::ToyAp,
                    _ => return Err(Error::InvalidConfig(format!("unknown reward `{r}`"))),
                };
                pairs.push((space, reward));
            }
            let runs = run_ablation(&plan, cache.clone(), &pairs, &out, jobs, top)?;
            let deform = if no_deform {
                None
            } else {
                let ctx = nfcs::orchestrator::EvalContext::new(plan.clone(), cache);
                Some(deform_baseline(&ctx, plan.proxy.iterations, plan.seed)?)
            };
            let report = AblationReport { runs, deform };
            std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
            for r in &report.runs {
                println!(
                    "{:<12} records {:>4}  top reward {:>10.4}  top holdout AP {:.4}",
                    variant_label(r.space, r.reward),
                    r.records,
                    r.top_reward,
                    r.mean_top_holdout_ap
                );
            }
            if let Some(d) = report.deform {
                println!(
                    "original FPN  reward {:.4} AP {:.4}\ndeformable FPN reward {:.4} AP {:.4}",
                    d.original.reward, d.original.holdout_ap, d.deformable.reward, d.deformable.holdout_ap
                );
            }
        }
        Command::Worker { plan, connect, name } => {
            let plan = plan.load()?;
            let opts = WorkerOptions {
                connect_attempts: 50,
                vanish_after: None,
            };
            let n = run_worker(&connect, &plan, &root, &name, &opts)?;
            eprintln!("worker {name} answered {n} jobs");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Progressive search driver and its JSON-lines log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::FeatureCache;
use super::plan::{SearchPlan, SearchSpace};
use super::proxy::{stage_graph, EvalContext, EvalJob, EvalOutcome, EvalStatus, PyramidCache, StageKind};
use crate::controller::{Policy, SampleBatch};
use crate::cost;
use crate::decoder_graph::FpnKind;
use crate::error::{Error, Result};
use crate::search_space::{action_space, decode_fpn, decode_head, sample_tokens, ActionSpace, Stage};
use crate::seed;
use crate::toyland::LossTerms;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub fpn_macs: u64,
    pub head_macs: u64,
    pub params: u64,
}

/// One evaluated architecture. Wall time lives in a sidecar file so the
/// log itself is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub seq: u64,
    pub stage: StageKind,
    /// Controller batch within the stage.
    pub batch: u64,
    pub tokens: Vec<usize>,
    /// `None` for diverged or failed evaluations.
    pub reward: Option<f64>,
    pub terms: Option<LossTerms>,
    pub ap: Option<f64>,
    pub cost: CostSummary,
    pub status: EvalStatus,
}

/// Fixed FPN under a head stage: searched tokens, or the original FPN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub fpn_tokens: Option<Vec<usize>>,
    pub seed: u64,
}

impl PyramidSpec {
    pub fn fpn_kind(&self) -> Result<FpnKind> {
        Ok(match &self.fpn_tokens {
            Some(t) => FpnKind::Searched(decode_fpn(t)?),
            None => FpnKind::Original,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header {
        version: u32,
        plan_hash: String,
        plan: SearchPlan,
    },
    Stage {
        stage: StageKind,
        archs: usize,
        pyramid: Option<PyramidSpec>,
    },
    Record(SearchRecord),
}

/// Runs batches of jobs, possibly in parallel or on remote workers.
/// Outcomes come back in job order.
pub trait Evaluator {
    fn evaluate(&mut self, jobs: &[EvalJob], pyramid: Option<&PyramidSpec>) -> Result<Vec<EvalOutcome>>;
}

/// In-process evaluation on `jobs` threads.
pub struct LocalEvaluator {
    ctx: EvalContext,
    pyramid: Option<PyramidSpec>,
    threads: usize,
}

impl LocalEvaluator {
    pub fn new(plan: SearchPlan, cache: Arc<FeatureCache>, threads: usize) -> Self {
        Self {
            ctx: EvalContext::new(plan, cache),
            pyramid: None,
            threads: threads.max(1),
        }
    }

    /// The evaluation context with `pyramid` pre-fetched.
    pub fn context(&mut self, pyramid: Option<&PyramidSpec>) -> Result<&EvalContext> {
        if pyramid != self.pyramid.as_ref() {
            self.ctx.pyramid = match pyramid {
                Some(spec) => Some(Arc::new(self.ctx.prefetch_pyramid(spec.fpn_kind()?, spec.seed)?)),
                None => None,
            };
            self.pyramid = pyramid.cloned();
        }
        Ok(&self.ctx)
    }

    pub fn pyramid_cache(&self) -> Option<&Arc<PyramidCache>> {
        self.ctx.pyramid.as_ref()
    }
}

impl Evaluator for LocalEvaluator {
    fn evaluate(&mut self, jobs: &[EvalJob], pyramid: Option<&PyramidSpec>) -> Result<Vec<EvalOutcome>> {
        let threads = self.threads.min(jobs.len()).max(1);
        let ctx = self.context(pyramid)?;
        if threads == 1 {
            return Ok(jobs.iter().map(|j| ctx.evaluate(j)).collect());
        }
        let mut out: Vec<Option<EvalOutcome>> = vec![None; jobs.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    s.spawn(move || {
                        jobs.iter()
                            .enumerate()
                            .skip(t)
                            .step_by(threads)
                            .map(|(i, j)| (i, ctx.evaluate(j)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, o) in h.join().expect("evaluation thread panicked") {
                    out[i] = Some(o);
                }
            }
        });
        Ok(out.into_iter().map(|o| o.expect("every job evaluated")).collect())
    }
}

/// Seed of job `id` under a plan.
pub fn job_seed(plan: &SearchPlan, id: u64) -> u64 {
    seed::derive(seed::derive_str(plan.seed, "job"), id)
}

fn stage_label(stage: StageKind) -> &'static str {
    match stage {
        StageKind::Fpn => "fpn",
        StageKind::Head => "head",
    }
}

fn stage_space(stage: StageKind) -> ActionSpace {
    match stage {
        StageKind::Fpn => action_space(Stage::FpnOnly),
        StageKind::Head => action_space(Stage::HeadOnly),
    }
}

/// Records with the `k` highest rewards of `stage`, best first; ties go to
/// the earlier sequence number.
pub fn top_k(records: &[SearchRecord], stage: StageKind, k: usize) -> Vec<SearchRecord> {
    let mut r: Vec<&SearchRecord> = records.iter().filter(|r| r.stage == stage && r.reward.is_some()).collect();
    r.sort_by(|a, b| {
        b.reward
            .partial_cmp(&a.reward)
            .expect("finite rewards")
            .then(a.seq.cmp(&b.seq))
    });
    r.into_iter().take(k).cloned().collect()
}

/// Controller rewards of a batch: diverged entries get the worst finite
/// reward of the batch. `None` when nothing in the batch is finite.
pub fn controller_rewards(rewards: &[Option<f64>]) -> Option<Vec<f64>> {
    let worst = rewards.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    worst.is_finite().then(|| rewards.iter().map(|r| r.unwrap_or(worst)).collect())
}

pub struct SearchOutcome {
    pub records: Vec<SearchRecord>,
    pub top_fpn: Vec<SearchRecord>,
    pub top_head: Vec<SearchRecord>,
    /// FPN under the head stage, when there was one.
    pub pyramid: Option<PyramidSpec>,
}

/// Log, checkpoints and timing sidecar of one search.
pub struct SearchPaths {
    pub log: PathBuf,
}

impl SearchPaths {
    pub fn new(log: impl Into<PathBuf>) -> Self {
        Self { log: log.into() }
    }

    fn with_suffix(&self, suffix: &str) -> PathBuf {
        let mut s = self.log.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    }

    pub fn checkpoint(&self, stage: StageKind) -> PathBuf {
        self.with_suffix(&format!(".{}.ckpt", stage_label(stage)))
    }

    pub fn times(&self) -> PathBuf {
        self.with_suffix(".times")
    }
}

#[derive(Serialize, Deserialize)]
struct TimeLine {
    seq: u64,
    wall_ms: f64,
}

/// Parsed log plus the byte length of its well-formed prefix.
struct ExistingLog {
    lines: Vec<(LogLine, usize)>,
}

fn read_log(path: &Path) -> Result<Option<ExistingLog>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut end = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 || !buf.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<LogLine>(buf.trim_end()) {
            Ok(line) => {
                end += n;
                lines.push((line, end));
            }
            Err(_) => break,
        }
    }
    Ok(Some(ExistingLog { lines }))
}

pub fn read_records(path: &Path) -> Result<Vec<SearchRecord>> {
    let log = read_log(path)?.ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no search log at {}", path.display()))))?;
    Ok(log
        .lines
        .into_iter()
        .filter_map(|(l, _)| match l {
            LogLine::Record(r) => Some(r),
            _ => None,
        })
        .collect())
}

/// Header and stage lines of a log.
pub fn read_log_lines(path: &Path) -> Result<Vec<LogLine>> {
    let log = read_log(path)?.ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no search log at {}", path.display()))))?;
    Ok(log.lines.into_iter().map(|(l, _)| l).collect())
}

struct StagePlan {
    stage: StageKind,
    archs: usize,
}

fn stage_plans(plan: &SearchPlan) -> Vec<StagePlan> {
    let fpn = StagePlan {
        stage: StageKind::Fpn,
        archs: plan.search.fpn_archs,
    };
    let head = StagePlan {
        stage: StageKind::Head,
        archs: plan.search.head_archs,
    };
    match plan.search.space {
        SearchSpace::F => vec![fpn],
        SearchSpace::H => vec![head],
        SearchSpace::Fh => vec![fpn, head],
    }
}

/// Drives the progressive search, appending to `paths.log`. An existing
/// log of the same plan is resumed from its last complete batch.
pub struct Search<'a> {
    plan: &'a SearchPlan,
    paths: SearchPaths,
    evaluator: &'a mut dyn Evaluator,
    /// Stop after this many batches in total; for interruption tests.
    pub batch_limit: Option<usize>,
}

impl<'a> Search<'a> {
    pub fn new(plan: &'a SearchPlan, paths: SearchPaths, evaluator: &'a mut dyn Evaluator) -> Self {
        Self {
            plan,
            paths,
            evaluator,
            batch_limit: None,
        }
    }

    pub fn run(&mut self) -> Result<SearchOutcome> {
        self.plan.validate()?;
        let plan_hash = self.plan.hash();
        let existing = read_log(&self.paths.log)?;
        let mut kept: Vec<LogLine> = Vec::new();
        let mut keep_bytes = 0usize;
        if let Some(log) = existing {
            match log.lines.first() {
                Some((LogLine::Header { plan_hash: h, .. }, _)) if *h == plan_hash => {}
                Some(_) => {
                    return Err(Error::Plan(format!(
                        "{} belongs to a different plan; remove it or pick another log path",
                        self.paths.log.display()
                    )))
                }
                None => {}
            }
            let complete = complete_prefix(self.plan, &log.lines);
            if complete > 0 {
                keep_bytes = log.lines[complete - 1].1;
            }
            kept = log.lines.into_iter().take(complete).map(|(l, _)| l).collect();
        }
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(&self.paths.log)?;
        file.set_len(keep_bytes as u64)?;
        drop(file);
        let mut log = OpenOptions::new().append(true).open(&self.paths.log)?;
        if kept.is_empty() {
            write_line(
                &mut log,
                &LogLine::Header {
                    version: LOG_VERSION,
                    plan_hash,
                    plan: self.plan.clone(),
                },
            )?;
        }
        let mut records: Vec<SearchRecord> = kept
            .iter()
            .filter_map(|l| match l {
                LogLine::Record(r) => Some(r.clone()),
                _ => None,
            })
            .collect();
        self.prune_times(records.len() as u64)?;
        let mut batches_run = 0usize;
        let mut pyramid: Option<PyramidSpec> = None;
        for sp in stage_plans(self.plan) {
            pyramid = match sp.stage {
                StageKind::Fpn => None,
                StageKind::Head => Some(self.head_pyramid(&records)?),
            };
            let stage_started = kept.iter().any(|l| matches!(l, LogLine::Stage { stage, .. } if *stage == sp.stage));
            if !stage_started {
                write_line(
                    &mut log,
                    &LogLine::Stage {
                        stage: sp.stage,
                        archs: sp.archs,
                        pyramid: pyramid.clone(),
                    },
                )?;
            }
            let done = self.run_stage(&sp, pyramid.as_ref(), &mut records, &mut log, &mut batches_run)?;
            if !done {
                break;
            }
        }
        Ok(SearchOutcome {
            top_fpn: top_k(&records, StageKind::Fpn, self.plan.search.top_k_fpn),
            top_head: top_k(&records, StageKind::Head, self.plan.search.top_k_head),
            records,
            pyramid,
        })
    }

    /// Best FPN of stage 1 (its top-1 record), or the original FPN in a
    /// head-only search.
    fn head_pyramid(&self, records: &[SearchRecord]) -> Result<PyramidSpec> {
        let seed = seed::derive_str(self.plan.seed, "pyramid");
        match self.plan.search.space {
            SearchSpace::Fh => {
                let best = top_k(records, StageKind::Fpn, 1)
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Diverged("every FPN of stage 1 diverged".into()))?;
                Ok(PyramidSpec {
                    fpn_tokens: Some(best.tokens),
                    seed,
                })
            }
            _ => Ok(PyramidSpec { fpn_tokens: None, seed }),
        }
    }

    fn prune_times(&self, keep_below: u64) -> Result<()> {
        let path = self.paths.times();
        let Ok(text) = std::fs::read_to_string(&path) else {
            return Ok(());
        };
        let kept: String = text
            .lines()
            .filter(|l| serde_json::from_str::<TimeLine>(l).is_ok_and(|t| t.seq < keep_below))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(path, kept)?;
        Ok(())
    }

    fn stage_seeds(&self, stage: StageKind) -> (u64, u64) {
        let label = stage_label(stage);
        (
            seed::derive_str(self.plan.seed, &format!("{label}-policy")),
            seed::derive_str(self.plan.seed, &format!("{label}-samples")),
        )
    }

    /// Restores the stage's controller after `done` complete batches, from
    /// the checkpoint when it matches and by replaying the log otherwise.
    fn restore_policy(&self, stage: StageKind, stage_records: &[SearchRecord], done: usize) -> Result<Policy> {
        let (policy_seed, sample_seed) = self.stage_seeds(stage);
        let epochs = self.plan.controller.ppo_epochs as u64;
        let updates: u64 = (0..done)
            .filter(|&b| {
                let r: Vec<_> = stage_records.iter().filter(|r| r.batch == b as u64).map(|r| r.reward).collect();
                controller_rewards(&r).is_some()
            })
            .count() as u64;
        if let Ok(p) = Policy::load(&self.paths.checkpoint(stage)) {
            if p.updates() == updates * epochs && *p.config() == self.plan.controller && *p.space() == stage_space(stage) {
                return Ok(p);
            }
        }
        let mut policy = Policy::new(stage_space(stage), self.plan.controller.clone(), policy_seed)?;
        for b in 0..done {
            let recs: Vec<&SearchRecord> = stage_records.iter().filter(|r| r.batch == b as u64).collect();
            let mut batch = policy.sample(seed::derive(sample_seed, b as u64), recs.len())?;
            if batch.tokens.iter().zip(&recs).any(|(t, r)| *t != r.tokens) {
                return Err(Error::Plan(format!(
                    "log batch {b} of the {} stage does not match the controller replay",
                    stage_label(stage)
                )));
            }
            let rewards: Vec<Option<f64>> = recs.iter().map(|r| r.reward).collect();
            if let Some(r) = controller_rewards(&rewards) {
                batch.set_rewards(r)?;
                policy.ppo_update(&batch)?;
            }
        }
        Ok(policy)
    }

    /// Returns false when stopped early by `batch_limit`.
    fn run_stage(
        &mut self,
        sp: &StagePlan,
        pyramid: Option<&PyramidSpec>,
        records: &mut Vec<SearchRecord>,
        log: &mut File,
        batches_run: &mut usize,
    ) -> Result<bool> {
        let per_batch = self.plan.controller.batch_archs;
        let n_batches = sp.archs.div_ceil(per_batch);
        let stage_records: Vec<SearchRecord> = records.iter().filter(|r| r.stage == sp.stage).cloned().collect();
        let done = stage_records.len() / per_batch
            + usize::from(stage_records.len() == sp.archs && sp.archs % per_batch != 0);
        let random = self.plan.search.random;
        let mut policy = if random {
            None
        } else {
            Some(self.restore_policy(sp.stage, &stage_records, done)?)
        };
        let (_, sample_seed) = self.stage_seeds(sp.stage);
        let head_fpn = match pyramid {
            Some(p) => p.fpn_kind()?,
            None => FpnKind::Original,
        };
        let image = self.plan.dataset.image_size;
        for b in done..n_batches {
            if self.batch_limit.is_some_and(|l| *batches_run >= l) {
                return Ok(false);
            }
            let n = per_batch.min(sp.archs - b * per_batch);
            let bseed = seed::derive(sample_seed, b as u64);
            let mut batch: Option<SampleBatch> = None;
            let tokens: Vec<Vec<usize>> = match &policy {
                Some(p) => {
                    let s = p.sample(bseed, n)?;
                    let t = s.tokens.clone();
                    batch = Some(s);
                    t
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(bseed);
                    let space = stage_space(sp.stage);
                    (0..n).map(|_| sample_tokens(&space, &mut rng)).collect()
                }
            };
            let first_seq = records.len() as u64;
            let jobs: Vec<EvalJob> = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let id = first_seq + i as u64;
                    EvalJob {
                        id,
                        stage: sp.stage,
                        tokens: t.clone(),
                        seed: job_seed(self.plan, id),
                    }
                })
                .collect();
            let outcomes = self.evaluator.evaluate(&jobs, pyramid)?;
            let mut times = OpenOptions::new().create(true).append(true).open(self.paths.times())?;
            for (job, out) in jobs.iter().zip(&outcomes) {
                if out.job_id != job.id {
                    return Err(Error::Protocol(format!("outcome for job {} arrived as job {}", job.id, out.job_id)));
                }
                let report = cost::cost(&stage_graph(self.plan, sp.stage, &job.tokens, head_fpn)?, (image, image));
                let rec = SearchRecord {
                    seq: job.id,
                    stage: sp.stage,
                    batch: b as u64,
                    tokens: job.tokens.clone(),
                    reward: out.reward,
                    terms: out.terms,
                    ap: out.ap,
                    cost: CostSummary {
                        fpn_macs: report.fpn_macs,
                        head_macs: report.head_macs,
                        params: report.params,
                    },
                    status: out.status.clone(),
                };
                write_line(log, &LogLine::Record(rec.clone()))?;
                writeln!(times, "{}", serde_json::to_string(&TimeLine { seq: job.id, wall_ms: out.wall_ms })?)?;
                records.push(rec);
            }
            log.flush()?;
            if let (Some(p), Some(mut batch)) = (policy.as_mut(), batch) {
                let rewards: Vec<Option<f64>> = outcomes.iter().map(|o| o.reward).collect();
                if let Some(r) = controller_rewards(&rewards) {
                    batch.set_rewards(r)?;
                    p.ppo_update(&batch)?;
                }
                p.save(&self.paths.checkpoint(sp.stage))?;
            }
            *batches_run += 1;
        }
        Ok(true)
    }
}

fn write_line(out: &mut File, line: &LogLine) -> Result<()> {
    let mut text = serde_json::to_string(line)?;
    text.push('\n');
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// Number of leading log lines that end on a complete batch.
fn complete_prefix(plan: &SearchPlan, lines: &[(LogLine, usize)]) -> usize {
    let per_batch = plan.controller.batch_archs;
    let archs = |stage: StageKind| match stage {
        StageKind::Fpn => plan.search.fpn_archs,
        StageKind::Head => plan.search.head_archs,
    };
    let mut keep = 0;
    let mut in_stage: Option<StageKind> = None;
    let mut count = 0usize;
    for (i, (line, _)) in lines.iter().enumerate() {
        match line {
            LogLine::Header { .. } => keep = i + 1,
            LogLine::Stage { stage, .. } => {
                in_stage = Some(*stage);
                count = 0;
                keep = i + 1;
            }
            LogLine::Record(r) => {
                if Some(r.stage) != in_stage {
                    break;
                }
                count += 1;
                if count % per_batch == 0 || count == archs(r.stage) {
                    keep = i + 1;
                }
            }
        }
    }
    keep
}

/// Fraction of fully shared heads (`share_from == 0`) in consecutive
/// windows of HEAD records; a trailing partial window is dropped.
pub fn sharing_trend(records: &[SearchRecord], window: usize) -> Result<Vec<f64>> {
    let shares = records
        .iter()
        .filter(|r| r.stage == StageKind::Head)
        .map(|r| decode_head(&r.tokens).map(|h| h.share_from == 0))
        .collect::<Result<Vec<bool>>>()?;
    Ok(shares
        .chunks_exact(window.max(1))
        .map(|w| w.iter().filter(|&&s| s).count() as f64 / w.len() as f64)
        .collect())
}

/// Trailing moving average; entry `i` averages `xs[i + 1 - window ..= i]`
/// (fewer at the start).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Ranks with ties sharing their average rank, 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    /// One-sided p-value of at least `wins` successes under a fair coin.
    pub p_value: f64,
}

/// One-sided sign test that `later[i] > earlier[i]`; ties are dropped.
pub fn sign_test(earlier: &[f64], later: &[f64]) -> SignTest {
    let (mut wins, mut losses) = (0, 0);
    for (a, b) in earlier.iter().zip(later) {
        if b > a {
            wins += 1;
        } else if b < a {
            losses += 1;
        }
    }
    let n = wins + losses;
    // P(X >= wins) for X ~ Bin(n, 1/2), summed in log space.
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    let p_value = (wins..=n).map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0);
    SignTest { wins, losses, p_value }
}

/// First-versus-last window comparison of a search log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub first_mean: f64,
    pub last_mean: f64,
    pub sign: SignTest,
}

/// Compares the first and last `window` records; diverged records count as
/// the worst reward in the log.
pub fn reward_trend(records: &[SearchRecord], window: usize) -> Option<TrendSummary> {
    if records.len() < 2 * window || window == 0 {
        return None;
    }
    let worst = records.iter().filter_map(|r| r.reward).fold(f64::INFINITY, f64::min);
    let worst = if worst.is_finite() { worst } else { 0.0 };
    let rewards: Vec<f64> = records.iter().map(|r| r.reward.unwrap_or(worst)).collect();
    let first = &rewards[..window];
    let last = &rewards[rewards.len() - window..];
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some(TrendSummary {
        first_mean: mean(first),
        last_mean: mean(last),
        sign: sign_test(first, last),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64, reward: Option<f64>) -> SearchRecord {
        SearchRecord {
            seq,
            stage: StageKind::Fpn,
            batch: 0,
            tokens: vec![],
            reward,
            terms: None,
            ap: None,
            cost: CostSummary {
                fpn_macs: 0,
                head_macs: 0,
                params: 0,
            },
            status: EvalStatus::Ok,
        }
    }

    #[test]
    fn top_k_breaks_ties_by_sequence() {
        let rs = vec![rec(0, Some(-2.0)), rec(1, Some(-1.0)), rec(2, None), rec(3, Some(-1.0)), rec(4, Some(-3.0))];
        let t: Vec<u64> = top_k(&rs, StageKind::Fpn, 3).iter().map(|r| r.seq).collect();
        assert_eq!(t, vec![1, 3, 0]);
        assert_eq!(top_k(&rs, StageKind::Fpn, 10).len(), 4);
    }

    #[test]
    fn controller_rewards_fill_divergence_with_batch_minimum() {
        assert_eq!(controller_rewards(&[Some(-3.0), None, Some(-1.0)]), Some(vec![-3.0, -3.0, -1.0]));
        assert_eq!(controller_rewards(&[None, None]), None);
    }

    #[test]
    fn spearman_extremes_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sign_test_binomial_tail() {
        let t = sign_test(&[0.0; 10], &[1.0; 10]);
        assert_eq!((t.wins, t.losses), (10, 0));
        assert!((t.p_value - 1.0 / 1024.0).abs() < 1e-15);
        // 3 wins of 4: P(X >= 3) = 5/16.
        let t = sign_test(&[0.0, 0.0, 0.0, 0.0, 1.0], &[1.0, 1.0, 1.0, -1.0, 1.0]);
        assert_eq!((t.wins, t.losses), (3, 1));
        assert!((t.p_value - 5.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn moving_average_warms_up() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}

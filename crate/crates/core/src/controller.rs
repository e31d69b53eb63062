//! Autoregressive LSTM policy over token sequences, trained with PPO.

use std::path::{Path, PathBuf};

use nfcs_tensor::{checkpoint, Adam, AdamConfig, Graph, LstmState, ParamStore, ParamVars, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::ActionSpace;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub clip_epsilon: f64,
    pub ppo_epochs: usize,
    pub batch_archs: usize,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
    pub lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            embedding_size: 32,
            clip_epsilon: 0.2,
            ppo_epochs: 3,
            batch_archs: 10,
            entropy_coef: 0.01,
            baseline_decay: 0.95,
            lr: 3.5e-4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(format!("controller: {m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon {} is outside (0, 1)", self.clip_epsilon));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} is outside [0, 1)", self.baseline_decay));
        }
        if self.hidden_size == 0 || self.embedding_size == 0 || self.batch_archs == 0 || self.ppo_epochs == 0 {
            return bad("sizes, batch and epochs must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        Ok(())
    }
}

/// Sampled architectures with their sampling-time log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub tokens: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    /// Baseline at sampling time; `None` before the first update.
    pub baseline: Option<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fills rewards and advantages. Without a baseline yet, the batch mean
    /// stands in for it.
    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.tokens.len() {
            return Err(Error::InvalidConfig(format!(
                "{} rewards for {} samples",
                rewards.len(),
                self.tokens.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Diverged("non-finite reward passed to the controller".into()));
        }
        let base = self.baseline.unwrap_or_else(|| mean(&rewards));
        self.advantages = rewards.iter().map(|r| r - base).collect();
        self.rewards = rewards;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Clipped surrogate before the first step.
    pub surrogate: f64,
    /// Mean per-token entropy before the first step.
    pub entropy: f64,
    /// Mean per-token ratio at the last epoch, before its step.
    pub mean_ratio: f64,
    pub baseline: f64,
}

pub struct Policy {
    config: PolicyConfig,
    space: ActionSpace,
    params: ParamStore<f64>,
    adam: Adam<f64>,
    baseline: Option<f64>,
}

struct Step<'g> {
    logp: Var<'g, f64>,
    entropy: Var<'g, f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn one_hot(tokens: &[usize], vocab: usize) -> Tensor<f64> {
    let mut data = vec![0.0; tokens.len() * vocab];
    for (r, &t) in tokens.iter().enumerate() {
        data[r * vocab + t] = 1.0;
    }
    Tensor::from_parts(vec![tokens.len(), vocab], data)
}

impl Policy {
    /// LSTM weights and embeddings are uniform in ±1/sqrt(H); the output
    /// projections start at zero so the fresh policy is uniform.
    pub fn new(space: ActionSpace, config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if space.vocab_sizes.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig("empty vocabulary".into()));
        }
        let (h, e) = (config.hidden_size, config.embedding_size);
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        params.insert("start", uniform(&[1, e]));
        params.insert("lstm.w", uniform(&[e + h, 4 * h]));
        params.insert("lstm.b", Tensor::zeros(&[4 * h]));
        for (k, &v) in space.vocab_sizes.iter().enumerate() {
            params.insert(format!("embed.{k}"), uniform(&[v, e]));
            params.insert(format!("proj.{k}.w"), Tensor::zeros(&[h, v]));
            params.insert(format!("proj.{k}.b"), Tensor::zeros(&[v]));
        }
        let adam = Adam::new(AdamConfig::with_lr(config.lr), &params);
        Ok(Self {
            config,
            space,
            params,
            adam,
            baseline: None,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// Overrides the baseline, e.g. to preset it to a batch mean.
    pub fn set_baseline(&mut self, baseline: Option<f64>) {
        self.baseline = baseline;
    }

    pub fn updates(&self) -> u64 {
        self.adam.steps()
    }

    /// Runs the LSTM over `n` sequences; `choose` picks the tokens of each
    /// position from its `[n, vocab]` log-probabilities.
    fn unroll<'g>(
        &self,
        g: &'g Graph<f64>,
        pv: &ParamVars<'g, f64>,
        n: usize,
        mut choose: impl FnMut(usize, &Tensor<f64>) -> Result<Vec<usize>>,
    ) -> Result<Vec<Step<'g>>> {
        let hdim = self.config.hidden_size;
        let ones = g.constant(Tensor::ones(&[n, 1]));
        let mut x = ones.matmul(pv.get("start")?)?;
        let mut state = LstmState {
            h: g.constant(Tensor::zeros(&[n, hdim])),
            c: g.constant(Tensor::zeros(&[n, hdim])),
        };
        let (w, b) = (pv.get("lstm.w")?, pv.get("lstm.b")?);
        let mut steps = Vec::with_capacity(self.space.len());
        for (k, &vocab) in self.space.vocab_sizes.iter().enumerate() {
            state = x.lstm_cell(state, w, b)?;
            let logits = state
                .h
                .matmul(pv.get(&format!("proj.{k}.w"))?)?
                .add_row(pv.get(&format!("proj.{k}.b"))?)?;
            let lsm = logits.log_softmax();
            let lsm_value = lsm.value();
            if !lsm_value.all_finite() {
                return Err(Error::Diverged(format!("controller logits at position {k} are not finite")));
            }
            let tokens = choose(k, &lsm_value)?;
            let logp = lsm.pick(&tokens)?;
            let entropy = lsm.exp().mul(lsm)?.sum_axis(1)?.neg();
            steps.push(Step { logp, entropy });
            x = g.constant(one_hot(&tokens, vocab)).matmul(pv.get(&format!("embed.{k}"))?)?;
        }
        Ok(steps)
    }

    /// Samples `n` sequences. Read-only on the policy.
    pub fn sample(&self, seed: u64, n: usize) -> Result<SampleBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let pv = self.params.attach_frozen(&g);
        let mut tokens = vec![Vec::with_capacity(self.space.len()); n];
        let mut log_probs = vec![Vec::with_capacity(self.space.len()); n];
        self.unroll(&g, &pv, n, |_, lsm| {
            let vocab = lsm.shape()[1];
            let mut picked = Vec::with_capacity(n);
            for r in 0..n {
                let row = &lsm.data()[r * vocab..(r + 1) * vocab];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = vocab - 1;
                for (t, &lp) in row.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        choice = t;
                        break;
                    }
                }
                picked.push(choice);
                tokens[r].push(choice);
                log_probs[r].push(row[choice]);
            }
            Ok(picked)
        })?;
        Ok(SampleBatch {
            tokens,
            log_probs,
            baseline: self.baseline,
            rewards: Vec::new(),
            advantages: Vec::new(),
        })
    }

    /// Per-position probability tables of the greedy (most likely) path,
    /// mostly for inspection.
    pub fn position_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.space.check(tokens)?;
        let g = Graph::new();
        let pv = self.params.attach_frozen(&g);
        let mut out = Vec::new();
        self.unroll(&g, &pv, 1, |k, lsm| {
            out.push(lsm.data().iter().map(|v| v.exp()).collect());
            Ok(vec![tokens[k]])
        })?;
        Ok(out)
    }

    /// PPO objective: mean over samples and positions of the clipped
    /// surrogate plus `entropy_coef` times the mean entropy.
    pub fn surrogate<'g>(&self, g: &'g Graph<f64>, pv: &ParamVars<'g, f64>, batch: &SampleBatch) -> Result<Var<'g, f64>> {
        Ok(self.surrogate_parts(g, pv, batch)?.0)
    }

    fn surrogate_parts<'g>(
        &self,
        g: &'g Graph<f64>,
        pv: &ParamVars<'g, f64>,
        batch: &SampleBatch,
    ) -> Result<(Var<'g, f64>, f64, f64, f64)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidConfig("empty sample batch".into()));
        }
        if batch.advantages.len() != n {
            return Err(Error::InvalidConfig("rewards not populated".into()));
        }
        for t in &batch.tokens {
            self.space.check(t)?;
        }
        let steps = self.unroll(g, pv, n, |k, _| Ok(batch.tokens.iter().map(|t| t[k]).collect()))?;
        let eps = self.config.clip_epsilon;
        let adv = g.constant(Tensor::from_parts(vec![n], batch.advantages.clone()));
        let mut surr = Vec::with_capacity(steps.len());
        let mut ents = Vec::with_capacity(steps.len());
        let mut ratio_sum = 0.0;
        for (k, step) in steps.iter().enumerate() {
            let old: Vec<f64> = batch.log_probs.iter().map(|lp| lp[k]).collect();
            let ratio = step.logp.sub(g.constant(Tensor::from_parts(vec![n], old)))?.exp();
            ratio_sum += ratio.value().sum();
            let unclipped = ratio.mul(adv)?;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps).mul(adv)?;
            surr.push(unclipped.minimum(clipped)?);
            ents.push(step.entropy);
        }
        let count = (n * steps.len()) as f64;
        let s = Var::add_n(&surr)?.sum().scale(1.0 / count);
        let e = Var::add_n(&ents)?.sum().scale(1.0 / count);
        let obj = s.add(e.scale(self.config.entropy_coef))?;
        Ok((obj, s.value().item(), e.value().item(), ratio_sum / count))
    }

    /// `ppo_epochs` Adam steps on the negated objective, then one EMA
    /// baseline update.
    pub fn ppo_update(&mut self, batch: &SampleBatch) -> Result<UpdateStats> {
        let mut stats = UpdateStats {
            surrogate: 0.0,
            entropy: 0.0,
            mean_ratio: 1.0,
            baseline: 0.0,
        };
        for epoch in 0..self.config.ppo_epochs {
            let g = Graph::new();
            let pv = self.params.attach(&g);
            let (obj, s, e, r) = self.surrogate_parts(&g, &pv, batch)?;
            if epoch == 0 {
                stats.surrogate = s;
                stats.entropy = e;
            }
            stats.mean_ratio = r;
            let grads = g.backward(obj.neg())?;
            let grads = pv.gradients(&grads);
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged("non-finite controller gradient".into()));
            }
            self.adam.step(&mut self.params, &grads)?;
        }
        let m = mean(&batch.rewards);
        let d = self.config.baseline_decay;
        let b = match self.baseline {
            None => m,
            Some(b) => d * b + (1.0 - d) * m,
        };
        self.baseline = Some(b);
        stats.baseline = b;
        Ok(stats)
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes parameters and Adam moments to `path` and the config,
    /// baseline and step count to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        let (m, v) = self.adam.moments();
        let names: Vec<String> = self.params.names().map(str::to_owned).collect();
        for (i, name) in names.iter().enumerate() {
            store.insert(format!("adam.m.{name}"), m[i].clone());
            store.insert(format!("adam.v.{name}"), v[i].clone());
        }
        checkpoint::save(path, &store).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = Sidecar {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab_sizes: self.space.vocab_sizes.clone(),
            offset: self.space.offset,
            baseline: self.baseline,
            adam_steps: self.adam.steps(),
        };
        std::fs::write(Self::sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: Sidecar = serde_json::from_slice(&std::fs::read(Self::sidecar(path))?)
            .map_err(|e| Error::Checkpoint(format!("sidecar: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "policy checkpoint version {} (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let store: ParamStore<f64> = checkpoint::load(path).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let space = ActionSpace {
            offset: meta.offset,
            vocab_sizes: meta.vocab_sizes,
        };
        let mut policy = Policy::new(space, meta.config, 0)?;
        let names: Vec<String> = policy.params.names().map(str::to_owned).collect();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        let fetch = |key: &str| {
            store
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))
        };
        for name in &names {
            policy.params.set(name, fetch(name)?)?;
            ms.push(fetch(&format!("adam.m.{name}"))?);
            vs.push(fetch(&format!("adam.v.{name}"))?);
        }
        policy.adam = Adam::from_state(AdamConfig::with_lr(policy.config.lr), meta.adam_steps, ms, vs);
        policy.baseline = meta.baseline;
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    config: PolicyConfig,
    vocab_sizes: Vec<usize>,
    offset: usize,
    baseline: Option<f64>,
    adam_steps: u64,
}

//! Losses, optimizers and the training loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sim::{collect_failures, collect_rl_transitions, mean_return, LearnedPlanner, ScenarioSpec, SimContext};
use crate::validity::ValidityRules;
use crate::scorer::{backward, forward, forward_logits, GradientBuffer, ScoreDistribution, ScorerParams};
use crate::world::SceneTensor;

/// Where a sample was taken: log id and tick.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub log: String,
    pub tick: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSample {
    pub origin: Origin,
    pub scene: SceneTensor,
    pub cands: Vec<Vec<f64>>,
    pub expert_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSample {
    pub origin: Origin,
    pub scene: SceneTensor,
    pub cands: Vec<Vec<f64>>,
    pub valid_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextState {
    pub scene: SceneTensor,
    pub cands: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlTransition {
    pub scene: SceneTensor,
    pub cands: Vec<Vec<f64>>,
    pub action: usize,
    pub reward: f64,
    /// `None` marks a terminal transition.
    pub next: Option<NextState>,
}

impl RlTransition {
    pub fn terminal(&self) -> bool {
        self.next.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub mistake_penalty: f64,
    pub goal_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mistake_penalty: 10.0,
            goal_bonus: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub w_valid: f64,
    pub w_imitation: f64,
    pub batch_expert: usize,
    pub batch_failure: usize,
    pub steps_il: usize,
    pub steps_vl: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub collect_fraction: f64,
    /// Training steps between failure collections.
    pub epoch_steps: usize,
    /// Held-out imitation loss is logged every this many steps.
    pub heldout_interval: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub replay_capacity: usize,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_valid: 1.0,
            w_imitation: 1.0,
            batch_expert: 16,
            batch_failure: 8,
            steps_il: 5000,
            steps_vl: 5000,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            collect_fraction: 0.04,
            epoch_steps: 250,
            heldout_interval: 25,
            gamma: 0.95,
            epsilon_start: 0.2,
            epsilon_end: 0.02,
            replay_capacity: 20_000,
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_expert >= 1
            && self.batch_failure >= 1
            && self.lr >= 0.0
            && self.w_valid >= 0.0
            && self.w_imitation >= 0.0
            && self.collect_fraction > 0.0
            && self.collect_fraction <= 1.0
            && self.epoch_steps >= 1
            && self.heldout_interval >= 1
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.epsilon_start)
            && (0.0..=1.0).contains(&self.epsilon_end)
            && self.replay_capacity >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("train config out of range".into()))
        }
    }
}

const LOG_FLOOR: f64 = 1e-12;

/// `-ln p[expert]` and its gradient `p - onehot(expert)`.
pub fn imitation_loss(dist: &ScoreDistribution, expert_index: usize) -> (f64, Vec<f64>) {
    let loss = -dist.probs[expert_index].max(LOG_FLOOR).ln();
    let mut grad = dist.probs.clone();
    grad[expert_index] -= 1.0;
    (loss, grad)
}

/// `-ln sum_{valid} p` and its gradient; `None` when no candidate is valid.
pub fn validity_loss(dist: &ScoreDistribution, valid_mask: &[bool]) -> Option<(f64, Vec<f64>)> {
    assert_eq!(valid_mask.len(), dist.probs.len());
    let mass: f64 = dist.probs.iter().zip(valid_mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
    if !valid_mask.iter().any(|&m| m) {
        return None;
    }
    let loss = -mass.max(LOG_FLOOR).ln();
    let grad = dist
        .probs
        .iter()
        .zip(valid_mask)
        .map(|(&p, &m)| if m { p - p / mass } else { p })
        .collect();
    Some((loss, grad))
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub imitation: Option<f64>,
    pub validity: Option<f64>,
    /// Failure samples skipped because no candidate was valid.
    pub no_valid: usize,
    pub grad: GradientBuffer,
}

/// Weighted mean imitation loss over `expert` plus mean validity loss over `failure`.
pub fn total_loss(
    expert: &[&ExpertSample],
    failure: &[&FailureSample],
    params: &ScorerParams,
    w_imitation: f64,
    w_valid: f64,
) -> Result<LossOutput> {
    if expert.is_empty() && failure.is_empty() {
        return Err(Error::EmptyBatches);
    }
    let mut grad = GradientBuffer::zeros(params.dims());
    let mut loss = 0.0;
    let mut imitation = None;
    let mut validity = None;
    let mut no_valid = 0;
    if !expert.is_empty() && w_imitation > 0.0 {
        let scale = w_imitation / expert.len() as f64;
        let mut sum = 0.0;
        for s in expert {
            let (dist, cache) = forward(params, &s.scene, &s.cands)?;
            let (l, g) = imitation_loss(&dist, s.expert_index);
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            backward(params, &cache, &g, &mut grad)?;
            sum += l;
        }
        let mean = sum / expert.len() as f64;
        loss += w_imitation * mean;
        imitation = Some(mean);
    }
    if !failure.is_empty() && w_valid > 0.0 {
        let mut terms = Vec::with_capacity(failure.len());
        for s in failure {
            let (dist, cache) = forward(params, &s.scene, &s.cands)?;
            match validity_loss(&dist, &s.valid_mask) {
                Some((l, g)) => terms.push((l, g, cache)),
                None => no_valid += 1,
            }
        }
        if !terms.is_empty() {
            let scale = w_valid / terms.len() as f64;
            let mut sum = 0.0;
            for (l, g, cache) in &terms {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                backward(params, cache, &g, &mut grad)?;
                sum += l;
            }
            let mean = sum / terms.len() as f64;
            loss += w_valid * mean;
            validity = Some(mean);
        }
    }
    Ok(LossOutput {
        loss,
        imitation,
        validity,
        no_valid,
        grad,
    })
}

/// Squared TD error with the next-state maximum treated as a constant.
pub fn td_loss(t: &RlTransition, params: &ScorerParams, gamma: f64) -> Result<(f64, GradientBuffer)> {
    let mut grad = GradientBuffer::zeros(params.dims());
    let (loss, _) = td_error_grad(t, params, gamma, &mut grad, 1.0)?;
    Ok((loss, grad))
}

fn td_error_grad(
    t: &RlTransition,
    params: &ScorerParams,
    gamma: f64,
    grad: &mut GradientBuffer,
    scale: f64,
) -> Result<(f64, f64)> {
    let (q, cache) = forward_logits(params, &t.scene, &t.cands)?;
    let bootstrap = match &t.next {
        Some(next) => {
            let (qn, _) = forward_logits(params, &next.scene, &next.cands)?;
            qn.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
        None => 0.0,
    };
    let delta = t.reward + gamma * bootstrap - q[t.action];
    let mut up = vec![0.0; q.len()];
    up[t.action] = -2.0 * delta * scale;
    backward(params, &cache, &up, grad)?;
    Ok((delta * delta, delta))
}

/// Mean imitation loss; `None` for an empty set.
pub fn mean_imitation_loss(params: &ScorerParams, samples: &[ExpertSample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for s in samples {
        let (dist, _) = forward(params, &s.scene, &s.cands)?;
        sum += imitation_loss(&dist, s.expert_index).0;
    }
    Ok(Some(sum / samples.len() as f64))
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ScorerParams, grad: &GradientBuffer) -> Result<()> {
        optimizer_step(params, grad, self)
    }
}

/// Applies one update; refuses non-finite gradients without touching `params`.
pub fn optimizer_step(params: &mut ScorerParams, grad: &GradientBuffer, opt: &mut Optimizer) -> Result<()> {
    if grad.data.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, parameters {}",
            grad.data.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.data.iter().position(|g| !g.is_finite()) {
        let block = params.block_of(i).name().to_string();
        log::warn!("skipping update: non-finite gradient in {block}");
        return Err(Error::NonFiniteGradient(block));
    }
    let lr = opt.lr;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.as_mut_slice().iter_mut().zip(&grad.data) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            opt.t += 1;
            let c1 = 1.0 - beta1.powi(opt.t as i32);
            let c2 = 1.0 - beta2.powi(opt.t as i32);
            let (m, v) = (&mut opt.m, &mut opt.v);
            for (i, p) in params.as_mut_slice().iter_mut().enumerate() {
                let g = grad.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
struct Shuffler {
    order: Vec<usize>,
    pos: usize,
}

impl Shuffler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    /// Per-step training loss.
    pub train: Vec<(usize, f64)>,
    /// Per-step imitation and validity components when present.
    pub imitation: Vec<(usize, f64)>,
    pub validity: Vec<(usize, f64)>,
    pub td: Vec<(usize, f64)>,
    /// Held-out imitation loss.
    pub heldout: Vec<(usize, f64)>,
    /// Mean episode reward on training scenarios.
    pub reward: Vec<(usize, f64)>,
}

impl Curves {
    fn series_mut(&mut self) -> [&mut Vec<(usize, f64)>; 6] {
        [
            &mut self.train,
            &mut self.imitation,
            &mut self.validity,
            &mut self.td,
            &mut self.heldout,
            &mut self.reward,
        ]
    }

    /// Puts the points of `earlier` logged before step `before` in front of
    /// this phase's points.
    pub fn prepend(&mut self, earlier: &Curves, before: usize) {
        let mut earlier = earlier.clone();
        for (mine, theirs) in self.series_mut().into_iter().zip(earlier.series_mut()) {
            let mut merged: Vec<(usize, f64)> = theirs.iter().copied().filter(|p| p.0 < before).collect();
            merged.append(mine);
            *mine = merged;
        }
    }
}

/// Owns parameters and optimizer state across training phases.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ScorerParams,
    pub cfg: TrainConfig,
    pub step: usize,
    pub curves: Curves,
    pub no_valid: usize,
    opt: Optimizer,
    rng: ChaCha8Rng,
    expert_order: Option<Shuffler>,
}

impl Trainer {
    pub fn new(params: ScorerParams, cfg: &TrainConfig, seed: u64) -> Self {
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, params.len());
        Self {
            params,
            cfg: cfg.clone(),
            step: 0,
            curves: Curves::default(),
            no_valid: 0,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            expert_order: None,
        }
    }

    fn expert_batch<'a>(&mut self, expert: &'a [ExpertSample]) -> Vec<&'a ExpertSample> {
        if expert.is_empty() {
            return Vec::new();
        }
        let stale = self.expert_order.as_ref().map_or(true, |s| s.order.len() != expert.len());
        if stale {
            self.expert_order = Some(Shuffler::new(expert.len(), &mut self.rng));
        }
        let idx = self
            .expert_order
            .as_mut()
            .unwrap()
            .take(self.cfg.batch_expert, &mut self.rng);
        idx.into_iter().map(|i| &expert[i]).collect()
    }

    fn sample_with_replacement<'a, T>(&mut self, pool: &'a [T], k: usize) -> Vec<&'a T> {
        if pool.is_empty() {
            return Vec::new();
        }
        (0..k).map(|_| &pool[self.rng.gen_range(0..pool.len())]).collect()
    }

    fn log_heldout(&mut self, heldout: Option<&[ExpertSample]>) -> Result<()> {
        if let Some(h) = heldout {
            if self.step % self.cfg.heldout_interval == 0 {
                if let Some(l) = mean_imitation_loss(&self.params, h)? {
                    self.curves.heldout.push((self.step, l));
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, grad: &GradientBuffer) -> Result<()> {
        match self.opt.step(&mut self.params, grad) {
            Err(Error::NonFiniteGradient(b)) => {
                log::warn!("step {} skipped: non-finite gradient in {b}", self.step);
                Ok(())
            }
            other => other,
        }
    }

    /// Imitation-only steps.
    pub fn il_steps(&mut self, expert: &[ExpertSample], steps: usize, heldout: Option<&[ExpertSample]>) -> Result<()> {
        self.vl_steps(expert, &[], steps, heldout)
    }

    /// Steps on one expert and one failure mini-batch each.
    pub fn vl_steps(
        &mut self,
        expert: &[ExpertSample],
        failure: &[FailureSample],
        steps: usize,
        heldout: Option<&[ExpertSample]>,
    ) -> Result<()> {
        for _ in 0..steps {
            self.log_heldout(heldout)?;
            let eb = self.expert_batch(expert);
            let fb = self.sample_with_replacement(failure, self.cfg.batch_failure);
            let out = total_loss(&eb, &fb, &self.params, self.cfg.w_imitation, self.cfg.w_valid)?;
            self.no_valid += out.no_valid;
            self.curves.train.push((self.step, out.loss));
            if let Some(l) = out.imitation {
                self.curves.imitation.push((self.step, l));
            }
            if let Some(l) = out.validity {
                self.curves.validity.push((self.step, l));
            }
            self.apply(&out.grad)?;
            self.step += 1;
        }
        self.log_heldout(heldout)
    }

    /// Steps mixing a TD mini-batch from `replay` with an imitation mini-batch.
    pub fn rl_steps(
        &mut self,
        expert: &[ExpertSample],
        replay: &[RlTransition],
        steps: usize,
        heldout: Option<&[ExpertSample]>,
    ) -> Result<()> {
        for _ in 0..steps {
            self.log_heldout(heldout)?;
            let eb = self.expert_batch(expert);
            let tb = self.sample_with_replacement(replay, self.cfg.batch_failure);
            let mut loss = 0.0;
            let mut grad = GradientBuffer::zeros(self.params.dims());
            if !eb.is_empty() {
                let out = total_loss(&eb, &[], &self.params, self.cfg.w_imitation, 0.0)?;
                if let Some(l) = out.imitation {
                    self.curves.imitation.push((self.step, l));
                }
                loss = out.loss;
                grad = out.grad;
            }
            if !tb.is_empty() {
                let scale = 1.0 / tb.len() as f64;
                let mut sum = 0.0;
                for t in &tb {
                    sum += td_error_grad(t, &self.params, self.cfg.gamma, &mut grad, scale)?.0;
                }
                let mean = sum * scale;
                self.curves.td.push((self.step, mean));
                loss += mean;
            }
            self.curves.train.push((self.step, loss));
            self.apply(&grad)?;
            self.step += 1;
        }
        self.log_heldout(heldout)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub curves: Curves,
}

pub fn train_il(params: ScorerParams, dataset: &[ExpertSample], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::MissingPrerequisite("expert dataset is empty".into()));
    }
    let mut t = Trainer::new(params, cfg, seed);
    t.il_steps(dataset, cfg.steps_il, None)?;
    Ok(TrainOutcome {
        params: t.params,
        curves: t.curves,
    })
}

/// Validity-learning steps on fixed datasets, logging held-out imitation loss.
pub fn train_vl(
    params: ScorerParams,
    expert: &[ExpertSample],
    failure: &[FailureSample],
    heldout: &[ExpertSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if expert.is_empty() || failure.is_empty() {
        return Err(Error::MissingPrerequisite("validity learning needs expert and failure data".into()));
    }
    let mut t = Trainer::new(params, cfg, seed);
    t.vl_steps(expert, failure, cfg.steps_vl, Some(heldout))?;
    Ok(TrainOutcome {
        params: t.params,
        curves: t.curves,
    })
}

/// Linear epsilon schedule over `epochs`.
pub fn epsilon_at(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.epsilon_start;
    }
    let f = (epoch as f64 / (epochs - 1) as f64).min(1.0);
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * f
}


/// Scenario pools and rules for the closed-loop regimes.
pub struct ClosedLoop<'a> {
    pub ctx: &'a SimContext,
    /// Training scenarios that rollouts are drawn from.
    pub pool: &'a [ScenarioSpec],
    /// Training scenarios behind the reward curve.
    pub probe: &'a [ScenarioSpec],
    /// Rules that decide planner mistakes during collection.
    pub rules: &'a ValidityRules,
    /// Rules the reward curve is measured under.
    pub probe_rules: &'a ValidityRules,
}

impl ClosedLoop<'_> {
    fn probe_reward(&self, params: &ScorerParams, reward: &RewardConfig, seed: u64) -> Result<f64> {
        let planner = LearnedPlanner {
            params: Arc::new(params.clone()),
        };
        mean_return(self.probe, &planner, self.probe_rules, self.ctx, reward, seed)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(epoch as u64 + 1)
}

#[derive(Clone, Debug)]
pub struct VlOutcome {
    pub params: ScorerParams,
    pub curves: Curves,
    pub failures: Vec<FailureSample>,
    /// (epoch, scenarios unrolled, scenarios failed)
    pub collection: Vec<(usize, usize, usize)>,
}

/// Validity learning from IL-pretrained parameters. Every epoch first unrolls
/// `collect_fraction` of the pool with the current parameters and adds the
/// failed scenarios' states to the failure set; with `collect` off the
/// failure set stays as given.
pub fn train_vl_closed_loop(
    params: ScorerParams,
    expert: &[ExpertSample],
    heldout: &[ExpertSample],
    mut failures: Vec<FailureSample>,
    collect: bool,
    cl: &ClosedLoop,
    cfg: &TrainConfig,
    step_offset: usize,
    seed: u64,
) -> Result<VlOutcome> {
    if expert.is_empty() {
        return Err(Error::MissingPrerequisite("expert dataset is empty".into()));
    }
    let mut t = Trainer::new(params, cfg, seed);
    t.step = step_offset;
    let epochs = cfg.steps_vl.div_ceil(cfg.epoch_steps);
    let mut collection = Vec::new();
    for epoch in 0..epochs {
        let r = cl.probe_reward(&t.params, &cfg.reward, seed)?;
        t.curves.reward.push((t.step, r));
        if collect {
            let planner = LearnedPlanner {
                params: Arc::new(t.params.clone()),
            };
            let got = collect_failures(cl.pool, &planner, cl.rules, cl.ctx, cfg.collect_fraction, epoch_seed(seed, epoch))?;
            log::info!(
                "epoch {epoch}: {} of {} rollouts failed, {} new failure states",
                got.failed,
                got.unrolled,
                got.samples.len()
            );
            collection.push((epoch, got.unrolled, got.failed));
            failures.extend(got.samples);
        }
        let steps = cfg.epoch_steps.min(cfg.steps_vl - epoch * cfg.epoch_steps);
        if failures.is_empty() {
            t.il_steps(expert, steps, Some(heldout))?;
        } else {
            t.vl_steps(expert, &failures, steps, Some(heldout))?;
        }
    }
    let r = cl.probe_reward(&t.params, &cfg.reward, seed)?;
    t.curves.reward.push((t.step, r));
    Ok(VlOutcome {
        params: t.params,
        curves: t.curves,
        failures,
        collection,
    })
}

/// IL+RL: TD mini-batches from a replay buffer filled by ε-greedy rollouts,
/// mixed with imitation mini-batches.
pub fn train_il_rl(
    params: ScorerParams,
    expert: &[ExpertSample],
    heldout: &[ExpertSample],
    cl: &ClosedLoop,
    cfg: &TrainConfig,
    step_offset: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if expert.is_empty() {
        return Err(Error::MissingPrerequisite("expert dataset is empty".into()));
    }
    let mut t = Trainer::new(params, cfg, seed);
    t.step = step_offset;
    let epochs = cfg.steps_vl.div_ceil(cfg.epoch_steps);
    let mut replay: std::collections::VecDeque<RlTransition> = std::collections::VecDeque::new();
    for epoch in 0..epochs {
        let r = cl.probe_reward(&t.params, &cfg.reward, seed)?;
        t.curves.reward.push((t.step, r));
        let eps = epsilon_at(cfg, epoch, epochs);
        let got = collect_rl_transitions(
            cl.pool,
            Arc::new(t.params.clone()),
            eps,
            cl.rules,
            cl.ctx,
            &cfg.reward,
            cfg.collect_fraction,
            epoch_seed(seed, epoch),
        )?;
        log::info!("epoch {epoch}: eps {eps:.3}, {} transitions, mean return {:.3}", got.transitions.len(), got.mean_return);
        replay.extend(got.transitions);
        while replay.len() > cfg.replay_capacity {
            replay.pop_front();
        }
        let buffer: Vec<RlTransition> = replay.iter().cloned().collect();
        let steps = cfg.epoch_steps.min(cfg.steps_vl - epoch * cfg.epoch_steps);
        t.rl_steps(expert, &buffer, steps, Some(heldout))?;
    }
    let r = cl.probe_reward(&t.params, &cfg.reward, seed)?;
    t.curves.reward.push((t.step, r));
    Ok(TrainOutcome {
        params: t.params,
        curves: t.curves,
    })
}

//! Non-reactive log-replay closed-loop simulation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{idm_planner, progress_fraction, simple_planner, IdmParams};
use crate::learn::{FailureSample, NextState, Origin, RewardConfig, RlTransition};
use crate::logs::{quantize_rows, quantize_tensor, RecordedLog};
use crate::sampler::{expert_trajectory, generate_candidates, vectorize_candidate, CandidateSet, SamplerConfig, Trajectory};
use crate::scorer::{forward_logits, ScorerParams};
use crate::validity::{Checker, CollisionDetail, Future, ValidityReport, ValidityRules, ValidityVerdict, Violation};
use crate::world::{vectorize_scene, FeatureLayout, RoutePath, Scene, SceneTensor, TrackState};

/// A fixed-length window of a recorded log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub log_id: String,
    pub start: f64,
    pub end: f64,
    pub route: String,
    /// Route arc length of the recorded ego at `start`.
    pub start_s: f64,
    /// Route arc length of the recorded ego at `end`.
    pub goal_s: f64,
}

impl ScenarioSpec {
    pub fn id(&self) -> String {
        format!("{}@{:.1}", self.log_id, self.start)
    }

    /// Arc length at which the goal counts as reached.
    pub fn goal_threshold(&self, cfg: &SimConfig) -> f64 {
        let span = (self.goal_s - self.start_s).max(0.0);
        self.goal_s - cfg.goal_tolerance.min(cfg.goal_tolerance_fraction * span)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub replan_period: f64,
    /// The goal is reached within this many metres of it...
    pub goal_tolerance: f64,
    /// ...capped at this fraction of the expert's progress over the window.
    pub goal_tolerance_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            replan_period: 0.5,
            goal_tolerance: 5.0,
            goal_tolerance_fraction: 0.1,
        }
    }
}

/// Logs and configuration shared by all rollouts.
pub struct SimContext {
    logs: BTreeMap<String, RecordedLog>,
    pub sampler: SamplerConfig,
    pub layout: FeatureLayout,
    pub sim: SimConfig,
}

impl SimContext {
    pub fn new(logs: Vec<RecordedLog>, sampler: SamplerConfig, layout: FeatureLayout, sim: SimConfig) -> Result<Self> {
        let replan = sim.replan_period / sampler.dt;
        if !(replan >= 1.0 && (replan - replan.round()).abs() < 1e-9) {
            return Err(Error::Config("replan_period must be a positive multiple of the tick".into()));
        }
        if sim.replan_period > sampler.horizon + 1e-9 {
            return Err(Error::Config("replan_period exceeds the planning horizon".into()));
        }
        Ok(Self {
            logs: logs.into_iter().map(|l| (l.id.clone(), l)).collect(),
            sampler,
            layout,
            sim,
        })
    }

    pub fn log(&self, id: &str) -> Result<&RecordedLog> {
        self.logs
            .get(id)
            .ok_or_else(|| Error::MissingPrerequisite(format!("log {id}")))
    }

    pub fn logs(&self) -> impl Iterator<Item = &RecordedLog> {
        self.logs.values()
    }

    pub fn replan_ticks(&self) -> usize {
        (self.sim.replan_period / self.sampler.dt).round() as usize
    }
}

/// Everything a planner sees at a decision time.
pub struct PlanInput<'a> {
    pub scene: &'a Scene,
    pub log: &'a RecordedLog,
    pub sampler: &'a SamplerConfig,
    pub cands: Option<&'a CandidateSet>,
    pub tensor: Option<&'a SceneTensor>,
    pub cand_vecs: Option<&'a [Vec<f64>]>,
}

pub struct Choice {
    pub traj: Trajectory,
    /// Index into the candidate set, when the choice came from it.
    pub index: Option<usize>,
}

pub trait Planner: Send + Sync {
    fn needs_candidates(&self) -> bool;

    fn needs_features(&self) -> bool {
        false
    }

    fn plan(&self, input: &PlanInput, rng: &mut ChaCha8Rng) -> Result<Choice>;
}

fn pick(input: &PlanInput, index: usize) -> Result<Choice> {
    let cands = input
        .cands
        .ok_or_else(|| Error::MissingPrerequisite("candidate set".into()))?;
    Ok(Choice {
        traj: cands.candidates[index].clone(),
        index: Some(index),
    })
}

fn q_values(params: &ScorerParams, input: &PlanInput) -> Result<Vec<f64>> {
    let (tensor, vecs) = input
        .tensor
        .zip(input.cand_vecs)
        .ok_or_else(|| Error::MissingPrerequisite("scene features".into()))?;
    Ok(forward_logits(params, tensor, vecs)?.0)
}

/// Argmax of the learned scorer.
pub struct LearnedPlanner {
    pub params: Arc<ScorerParams>,
}

impl Planner for LearnedPlanner {
    fn needs_candidates(&self) -> bool {
        true
    }

    fn needs_features(&self) -> bool {
        true
    }

    fn plan(&self, input: &PlanInput, _: &mut ChaCha8Rng) -> Result<Choice> {
        let logits = q_values(&self.params, input)?;
        pick(input, crate::scorer::argmax(&logits))
    }
}

/// Uniform random candidate with probability `epsilon`, else the argmax.
pub struct EpsilonGreedy {
    pub params: Arc<ScorerParams>,
    pub epsilon: f64,
}

impl Planner for EpsilonGreedy {
    fn needs_candidates(&self) -> bool {
        true
    }

    fn needs_features(&self) -> bool {
        true
    }

    fn plan(&self, input: &PlanInput, rng: &mut ChaCha8Rng) -> Result<Choice> {
        let logits = q_values(&self.params, input)?;
        // always draw both numbers so the stream does not depend on epsilon
        let explore = rng.gen::<f64>() < self.epsilon;
        let random = rng.gen_range(0..logits.len());
        pick(input, if explore { random } else { crate::scorer::argmax(&logits) })
    }
}

pub struct SimplePlanner;

impl Planner for SimplePlanner {
    fn needs_candidates(&self) -> bool {
        false
    }

    fn plan(&self, input: &PlanInput, _: &mut ChaCha8Rng) -> Result<Choice> {
        Ok(Choice {
            traj: simple_planner(input.scene, input.sampler),
            index: None,
        })
    }
}

pub struct IdmPlanner {
    pub params: IdmParams,
}

impl Planner for IdmPlanner {
    fn needs_candidates(&self) -> bool {
        false
    }

    fn plan(&self, input: &PlanInput, _: &mut ChaCha8Rng) -> Result<Choice> {
        Ok(Choice {
            traj: idm_planner(input.scene, input.sampler, &self.params),
            index: None,
        })
    }
}

/// Replays the recorded ego motion.
pub struct ExpertReplay;

impl Planner for ExpertReplay {
    fn needs_candidates(&self) -> bool {
        false
    }

    fn plan(&self, input: &PlanInput, _: &mut ChaCha8Rng) -> Result<Choice> {
        let steps = input.sampler.steps();
        let traj = expert_trajectory(&input.log.ego.states, input.scene.tick as usize, steps, input.log.dt)
            .ok_or(Error::OutOfRange {
                t: input.scene.t,
                start: 0.0,
                end: input.log.duration,
            })?;
        Ok(Choice { traj, index: None })
    }
}

/// Always the stay candidate.
pub struct StayPlanner;

impl Planner for StayPlanner {
    fn needs_candidates(&self) -> bool {
        true
    }

    fn plan(&self, input: &PlanInput, _: &mut ChaCha8Rng) -> Result<Choice> {
        let i = input
            .sampler
            .stay_index()
            .ok_or_else(|| Error::Config("sampler has no stay candidate".into()))?;
        pick(input, i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Mistake { kind: Violation, t: f64 },
    Timeout,
}

impl Outcome {
    pub fn label(&self) -> String {
        match self {
            Outcome::Success => "success".into(),
            Outcome::Mistake { kind, .. } => format!("mistake:{}", kind.name()),
            Outcome::Timeout => "timeout".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub tick: i64,
    pub chosen: Option<usize>,
    pub verdict: ValidityVerdict,
    /// Validity of every candidate, when recorded.
    pub report: Option<ValidityReport>,
    /// Furthest route projection before this decision.
    pub max_s: f64,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub scenario: ScenarioSpec,
    pub outcome: Outcome,
    /// Ego states indexed by tick: the recorded prefix up to `start_tick`,
    /// then the executed motion.
    pub ego: Vec<TrackState>,
    pub start_tick: usize,
    pub max_s: f64,
    /// Fraction in [0, 1].
    pub progress: f64,
    pub distance: f64,
    pub collision_detail: Option<CollisionDetail>,
    pub steps: Vec<StepRecord>,
}

impl RolloutResult {
    pub fn failed(&self) -> bool {
        matches!(self.outcome, Outcome::Mistake { .. })
    }
}

/// The chosen candidate's primary violation, if any.
pub fn detect_mistake(report: &ValidityReport, chosen_index: usize) -> Option<Violation> {
    report.verdicts[chosen_index].violations.primary()
}

fn scenario_seed(seed: u64, sc: &ScenarioSpec) -> u64 {
    // FNV-1a over the scenario id
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sc.id().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn scene_at(log: &RecordedLog, route: &Arc<RoutePath>, ego: &[TrackState], tick: i64, h: usize) -> Scene {
    Scene::assemble(
        log.map.clone(),
        route.clone(),
        ego,
        log.ego.footprint,
        &log.agents,
        tick,
        log.dt,
        h,
    )
}

pub fn features(scene: &Scene, cands: &CandidateSet, layout: &FeatureLayout) -> Result<(SceneTensor, Vec<Vec<f64>>)> {
    let tensor = vectorize_scene(scene, layout)?;
    let vecs = cands.candidates.iter().map(|c| vectorize_candidate(c, layout)).collect();
    Ok((tensor, vecs))
}

/// Unrolls `planner` over the scenario window while agents replay the log.
pub fn rollout_scenario(
    sc: &ScenarioSpec,
    planner: &dyn Planner,
    rules: &ValidityRules,
    ctx: &SimContext,
    seed: u64,
) -> Result<RolloutResult> {
    rollout_with(sc, planner, rules, ctx, seed, false)
}

/// As [`rollout_scenario`], optionally recording the validity of every
/// candidate at every decision.
pub fn rollout_with(
    sc: &ScenarioSpec,
    planner: &dyn Planner,
    rules: &ValidityRules,
    ctx: &SimContext,
    seed: u64,
    record_reports: bool,
) -> Result<RolloutResult> {
    let log = ctx.log(&sc.log_id)?;
    let route = log.route_path_named(&sc.route)?;
    let dt = log.dt;
    let steps = ctx.sampler.steps();
    let replan = ctx.replan_ticks();
    let h = ctx.layout.history;
    let start_tick = (sc.start / dt).round() as usize;
    let end_tick = (sc.end / dt).round() as usize;
    if end_tick + steps > log.last_tick() as usize || start_tick > end_tick {
        return Err(Error::OutOfRange {
            t: sc.end,
            start: 0.0,
            end: log.duration,
        });
    }
    let goal = sc.goal_threshold(&ctx.sim);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed(seed, sc));
    let mut ego: Vec<TrackState> = log.ego.states[..=start_tick].to_vec();
    let mut tick = start_tick;
    let mut s_cur = route.project(ego[tick].pos).s;
    let mut max_s = s_cur;
    let mut distance = 0.0;
    let mut records = Vec::new();
    let mut collision_detail = None;
    let outcome = 'outer: loop {
        if max_s >= goal {
            break Outcome::Success;
        }
        if tick >= end_tick {
            break Outcome::Timeout;
        }
        let scene = scene_at(log, &route, &ego, tick as i64, h);
        let cands = if planner.needs_candidates() || record_reports {
            Some(generate_candidates(&scene, &ctx.sampler)?)
        } else {
            None
        };
        let feats = match &cands {
            Some(c) if planner.needs_features() => Some(features(&scene, c, &ctx.layout)?),
            _ => None,
        };
        let input = PlanInput {
            scene: &scene,
            log,
            sampler: &ctx.sampler,
            cands: cands.as_ref(),
            tensor: feats.as_ref().map(|f| &f.0),
            cand_vecs: feats.as_ref().map(|f| f.1.as_slice()),
        };
        let choice = planner.plan(&input, &mut rng)?;
        let future = Future {
            agents: &log.agents,
            ego_history: &ego,
        };
        let checker = Checker::new(&scene, &future, rules, steps, dt);
        let verdict = checker.verdict(&choice.traj);
        let report = if record_reports {
            cands
                .as_ref()
                .map(|c| crate::validity::report_from(c.candidates.iter().map(|t| checker.verdict(t)).collect()))
        } else {
            None
        };
        let mistake = verdict.violations.primary();
        if mistake == Some(Violation::Collision) {
            collision_detail = verdict.collision_detail;
        }
        records.push(StepRecord {
            tick: tick as i64,
            chosen: choice.index,
            verdict,
            report,
            max_s,
        });
        if let Some(kind) = mistake {
            break Outcome::Mistake {
                kind,
                t: tick as f64 * dt,
            };
        }
        for k in 0..replan {
            let p = &choice.traj.poses[k];
            let prev = ego[tick].pos;
            tick += 1;
            ego.push(TrackState {
                t: tick as f64 * dt,
                pos: p.pos,
                heading: p.heading,
                speed: p.speed,
            });
            distance += p.pos.distance(prev);
            s_cur = route.project_between(p.pos, s_cur - 10.0, s_cur + 10.0).s;
            max_s = max_s.max(s_cur);
            if max_s >= goal {
                break 'outer Outcome::Success;
            }
            if tick >= end_tick {
                break;
            }
        }
    };
    let progress = if outcome == Outcome::Success {
        1.0
    } else {
        progress_fraction(max_s, sc)
    };
    Ok(RolloutResult {
        scenario: sc.clone(),
        outcome,
        ego,
        start_tick,
        max_s,
        progress,
        distance,
        collision_detail,
        steps: records,
    })
}

/// Scene features at every recorded decision of a rollout.
fn decision_features(
    r: &RolloutResult,
    ctx: &SimContext,
) -> Result<Vec<(i64, SceneTensor, Vec<Vec<f64>>)>> {
    let log = ctx.log(&r.scenario.log_id)?;
    let route = log.route_path_named(&r.scenario.route)?;
    r.steps
        .iter()
        .map(|st| {
            let scene = scene_at(log, &route, &r.ego, st.tick, ctx.layout.history);
            let cands = generate_candidates(&scene, &ctx.sampler)?;
            let (mut tensor, mut vecs) = features(&scene, &cands, &ctx.layout)?;
            quantize_tensor(&mut tensor);
            quantize_rows(&mut vecs);
            Ok((st.tick, tensor, vecs))
        })
        .collect()
}

/// Every decision state of a failed rollout with its validity mask.
pub fn failure_samples(r: &RolloutResult, ctx: &SimContext) -> Result<Vec<FailureSample>> {
    if !r.failed() {
        return Ok(Vec::new());
    }
    let feats = decision_features(r, ctx)?;
    r.steps
        .iter()
        .zip(feats)
        .map(|(st, (tick, scene, cands))| {
            let report = st
                .report
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("rollout without validity reports".into()))?;
            Ok(FailureSample {
                origin: Origin {
                    log: r.scenario.log_id.clone(),
                    tick,
                },
                scene,
                cands,
                valid_mask: report.valid_mask.clone(),
            })
        })
        .collect()
}

/// Seeded choice of `ceil(fraction * n)` distinct indices, in ascending order.
pub fn sample_scenarios(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("collection fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Clone, Debug, Default)]
pub struct FailureCollection {
    pub samples: Vec<FailureSample>,
    pub unrolled: usize,
    pub failed: usize,
}

/// Unrolls a seeded subset of `pool` and harvests the failed scenarios.
pub fn collect_failures(
    pool: &[ScenarioSpec],
    planner: &dyn Planner,
    rules: &ValidityRules,
    ctx: &SimContext,
    fraction: f64,
    seed: u64,
) -> Result<FailureCollection> {
    use rayon::prelude::*;
    let idx = sample_scenarios(pool.len(), fraction, seed)?;
    let per: Vec<Vec<FailureSample>> = idx
        .par_iter()
        .map(|&i| {
            let r = rollout_with(&pool[i], planner, rules, ctx, seed, true)?;
            failure_samples(&r, ctx)
        })
        .collect::<Result<_>>()?;
    Ok(FailureCollection {
        unrolled: idx.len(),
        failed: per.iter().filter(|s| !s.is_empty()).count(),
        samples: per.into_iter().flatten().collect(),
    })
}

/// Reward of each decision of a rollout.
pub fn step_rewards(r: &RolloutResult, ctx: &SimContext, reward: &RewardConfig) -> Result<Vec<f64>> {
    let log = ctx.log(&r.scenario.log_id)?;
    let route = log.route_path_named(&r.scenario.route)?;
    let n = r.steps.len();
    Ok(r
        .steps
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let next_s = r.steps.get(i + 1).map_or(r.max_s, |n| n.max_s);
            let horizon_m = ctx.sampler.horizon * route.speed_limit_at(st.max_s).max(1.0);
            let mut rew = (next_s - st.max_s) / horizon_m;
            if i + 1 == n {
                match r.outcome {
                    Outcome::Mistake { .. } => rew -= reward.mistake_penalty,
                    Outcome::Success => rew += reward.goal_bonus,
                    Outcome::Timeout => {}
                }
            }
            rew
        })
        .collect())
}

pub fn episode_return(r: &RolloutResult, ctx: &SimContext, reward: &RewardConfig) -> Result<f64> {
    Ok(step_rewards(r, ctx, reward)?.iter().sum())
}

#[derive(Clone, Debug, Default)]
pub struct RlCollection {
    pub transitions: Vec<RlTransition>,
    pub episodes: usize,
    pub mean_return: f64,
}

/// ε-greedy rollouts over a seeded subset of `pool`, one transition per
/// decision.
pub fn collect_rl_transitions(
    pool: &[ScenarioSpec],
    params: Arc<ScorerParams>,
    epsilon: f64,
    rules: &ValidityRules,
    ctx: &SimContext,
    reward: &RewardConfig,
    fraction: f64,
    seed: u64,
) -> Result<RlCollection> {
    use rayon::prelude::*;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let idx = sample_scenarios(pool.len(), fraction, seed)?;
    let planner = EpsilonGreedy { params, epsilon };
    let per: Vec<(Vec<RlTransition>, f64)> = idx
        .par_iter()
        .map(|&i| {
            let r = rollout_scenario(&pool[i], &planner, rules, ctx, seed)?;
            let rewards = step_rewards(&r, ctx, reward)?;
            let feats = decision_features(&r, ctx)?;
            let total: f64 = rewards.iter().sum();
            let mut out = Vec::with_capacity(feats.len());
            for (i, (_, scene, cands)) in feats.iter().enumerate() {
                let next = (i + 1 < feats.len()).then(|| NextState {
                    scene: feats[i + 1].1.clone(),
                    cands: feats[i + 1].2.clone(),
                });
                out.push(RlTransition {
                    scene: scene.clone(),
                    cands: cands.clone(),
                    action: r.steps[i].chosen.expect("candidate planner"),
                    reward: rewards[i],
                    next,
                });
            }
            Ok((out, total))
        })
        .collect::<Result<_>>()?;
    let episodes = per.len();
    let mean_return = if episodes == 0 {
        0.0
    } else {
        per.iter().map(|p| p.1).sum::<f64>() / episodes as f64
    };
    Ok(RlCollection {
        transitions: per.into_iter().flat_map(|p| p.0).collect(),
        episodes,
        mean_return,
    })
}

/// Mean greedy episode return of `planner` over `probe`.
pub fn mean_return(
    probe: &[ScenarioSpec],
    planner: &dyn Planner,
    rules: &ValidityRules,
    ctx: &SimContext,
    reward: &RewardConfig,
    seed: u64,
) -> Result<f64> {
    use rayon::prelude::*;
    if probe.is_empty() {
        return Ok(0.0);
    }
    let returns: Vec<f64> = probe
        .par_iter()
        .map(|sc| episode_return(&rollout_scenario(sc, planner, rules, ctx, seed)?, ctx, reward))
        .collect::<Result<_>>()?;
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

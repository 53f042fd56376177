//! Baseline planners, closed-loop metrics and the benchmark runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, OrientedRect, Vec2};
use crate::logs::RecordedLog;
use crate::sampler::{Pose, SamplerConfig, Trajectory};
use crate::sim::{rollout_scenario, Outcome, Planner, RolloutResult, ScenarioSpec, SimContext};
use crate::validity::{Side, ValidityRules};
use crate::world::{AgentTrack, Footprint, Scene, TrackState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub a_max: f64,
    pub b: f64,
    pub s0: f64,
    pub time_headway: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 2.0,
            b: 2.0,
            s0: 2.0,
            time_headway: 1.5,
            delta: 4.0,
        }
    }
}

/// Intelligent Driver Model acceleration. `gap` is the bumper gap to the
/// leader (None on a free road) and `dv` the approach rate `v - v_leader`.
pub fn idm_accel(v: f64, v0: f64, gap: Option<f64>, dv: f64, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / v0).powf(p.delta);
    let interaction = match gap {
        Some(s) => {
            let s_star = p.s0 + v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt());
            (s_star / s.max(1e-3)).powi(2)
        }
        None => 0.0,
    };
    p.a_max * (free - interaction)
}

/// Straight line along the current heading at the current speed, or 5 m/s
/// when stopped.
pub fn simple_planner(scene: &Scene, sampler: &SamplerConfig) -> Trajectory {
    let ego = &scene.ego;
    let v = if ego.speed < 1e-3 { 5.0 } else { ego.speed };
    let dir = Vec2::from_heading(ego.heading);
    let start = Pose {
        pos: ego.position,
        heading: ego.heading,
        speed: ego.speed,
    };
    let poses = (1..=sampler.steps())
        .map(|k| Pose {
            pos: ego.position + dir * (v * k as f64 * sampler.dt),
            heading: ego.heading,
            speed: v,
        })
        .collect();
    Trajectory {
        start,
        poses,
        dt: sampler.dt,
    }
}

/// Nearest agent ahead in the route corridor at the scene time: (bumper gap
/// along the route, speed along the route).
pub fn corridor_leader(scene: &Scene, look: f64) -> Option<(f64, f64)> {
    let route = &scene.route;
    let s_ego = scene.ego_projection().s;
    let half = 0.5 * scene.ego.footprint.length;
    let mut best: Option<(f64, f64)> = None;
    for a in &scene.agent_histories {
        let st = a.history.current();
        if st.pos.distance(scene.ego.position) > look + 10.0 {
            continue;
        }
        let proj = route.project_between(st.pos, s_ego, s_ego + look);
        if proj.s <= s_ego + 0.1 || proj.distance > 0.5 * (scene.ego.footprint.width + a.footprint.width) + 0.3 {
            continue;
        }
        let (_, h) = route.pose_at(proj.s);
        let along = st.speed * normalize_angle(st.heading - h).cos();
        let gap = proj.s - s_ego - half - 0.5 * a.footprint.length;
        if best.map_or(true, |b| gap < b.0) {
            best = Some((gap, along.max(0.0)));
        }
    }
    best
}

/// IDM along the route centerline against the nearest corridor leader, which
/// is extrapolated at constant speed over the horizon.
pub fn idm_planner(scene: &Scene, sampler: &SamplerConfig, p: &IdmParams) -> Trajectory {
    let route = &scene.route;
    let dt = sampler.dt;
    let mut s = scene.ego_projection().s;
    let mut v = scene.ego.speed;
    let mut leader = corridor_leader(scene, 80.0);
    let start = Pose {
        pos: scene.ego.position,
        heading: scene.ego.heading,
        speed: v,
    };
    let mut poses = Vec::with_capacity(sampler.steps());
    for _ in 0..sampler.steps() {
        let v0 = route.speed_limit_at(s).max(0.1);
        let a = idm_accel(v, v0, leader.map(|l| l.0), leader.map_or(0.0, |l| v - l.1), p);
        let v1 = (v + a * dt).max(0.0);
        let ds = 0.5 * (v + v1) * dt;
        s += ds;
        if let Some((gap, vl)) = leader.as_mut() {
            *gap += *vl * dt - ds;
        }
        v = v1;
        let (pos, heading) = route.pose_at(s);
        poses.push(Pose {
            pos,
            heading: normalize_angle(heading),
            speed: v,
        });
    }
    Trajectory { start, poses, dt }
}

/// Percent of the route between the scenario start and its goal covered by
/// the furthest projection of the ego trace.
pub fn compute_progress(rollout: &RolloutResult, scenario: &ScenarioSpec) -> f64 {
    if matches!(rollout.outcome, Outcome::Success) {
        return 100.0;
    }
    100.0 * progress_fraction(rollout.max_s, scenario)
}

pub fn progress_fraction(max_s: f64, scenario: &ScenarioSpec) -> f64 {
    let span = scenario.goal_s - scenario.start_s;
    if span <= 1e-9 {
        return if max_s >= scenario.goal_s { 1.0 } else { 0.0 };
    }
    ((max_s - scenario.start_s) / span).clamp(0.0, 1.0)
}

pub const TTC_CAP: f64 = 5.0;

/// Smallest time at which constant-velocity extrapolations of the ego and
/// any agent overlap, swept at `dt / 2` up to the cap.
pub fn ttc_at(ego: &TrackState, ego_fp: &Footprint, agents: &[(TrackState, Footprint)], dt: f64) -> f64 {
    let step = 0.5 * dt;
    let n = (TTC_CAP / step).round() as usize;
    let ego_v = Vec2::from_heading(ego.heading) * ego.speed;
    let mut best = TTC_CAP;
    for (st, fp) in agents {
        let v = Vec2::from_heading(st.heading) * st.speed;
        let rel_speed = (v - ego_v).norm();
        let reach = 0.5 * (ego_fp.length.hypot(ego_fp.width) + fp.length.hypot(fp.width));
        if ego.pos.distance(st.pos) - reach > rel_speed * best {
            continue;
        }
        for k in 0..=n {
            let t = k as f64 * step;
            if t >= best {
                break;
            }
            let a = OrientedRect::new(ego.pos + ego_v * t, ego.heading, ego_fp.length, ego_fp.width);
            let b = OrientedRect::new(st.pos + v * t, st.heading, fp.length, fp.width);
            if a.overlaps(&b) {
                best = t;
                break;
            }
        }
    }
    best
}

/// Minimum TTC over the executed ticks of a rollout.
pub fn min_ttc(trace: &[TrackState], first_tick: usize, ego_fp: &Footprint, agents: &[AgentTrack], dt: f64) -> f64 {
    let mut best = TTC_CAP;
    for (tick, st) in trace.iter().enumerate().skip(first_tick) {
        let others: Vec<(TrackState, Footprint)> = agents
            .iter()
            .map(|a| (a.state_at(tick as i64), a.footprint))
            .filter(|(s, _)| s.pos.distance(st.pos) < 80.0)
            .collect();
        best = best.min(ttc_at(st, ego_fp, &others, dt));
    }
    best
}

/// One benchmark row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub planner: String,
    pub seed: u64,
    pub scenario: String,
    pub outcome: String,
    pub success: bool,
    /// Percent in [0, 100].
    pub progress: f64,
    pub distance: f64,
    pub collision_side: Option<Side>,
    pub min_ttc: f64,
}

pub const TTC_BOUND: f64 = 0.95;

pub fn scenario_metrics(
    planner: &str,
    seed: u64,
    rollout: &RolloutResult,
    log: &RecordedLog,
) -> ScenarioMetrics {
    let sc = &rollout.scenario;
    let collision_side = match rollout.outcome {
        Outcome::Mistake { kind: crate::validity::Violation::Collision, .. } => {
            rollout.collision_detail.as_ref().map(|c| c.side)
        }
        _ => None,
    };
    ScenarioMetrics {
        planner: planner.to_string(),
        seed,
        scenario: sc.id(),
        outcome: rollout.outcome.label(),
        success: matches!(rollout.outcome, Outcome::Success),
        progress: compute_progress(rollout, sc),
        distance: rollout.distance,
        collision_side,
        min_ttc: min_ttc(&rollout.ego, rollout.start_tick, &log.ego.footprint, &log.agents, log.dt),
    }
}

/// Metrics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub scenarios: usize,
    pub progress_pct: f64,
    pub success_pct: f64,
    pub collision_pct: f64,
    pub collision_back_pct: f64,
    pub collision_front_pct: f64,
    pub collision_side_pct: f64,
    pub distance: f64,
    pub collisions: usize,
    /// Distance between collisions; None stands for infinity (no collisions).
    pub mdbc: Option<f64>,
    pub ttc_within_bound_pct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    /// None when infinite.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[Option<f64>]) -> Self {
        if values.is_empty() || values.iter().any(|v| v.is_none()) {
            return Self { mean: None, std: None };
        }
        let xs: Vec<f64> = values.iter().map(|v| v.unwrap()).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
        }
    }

    fn finite(values: &[f64]) -> Self {
        Self::of(&values.iter().map(|&v| Some(v)).collect::<Vec<_>>())
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => write!(f, "{m:.1}±{s:.1}"),
            _ => write!(f, "∞"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub planner: String,
    /// Scenarios per seed.
    pub scenarios: usize,
    pub per_seed: Vec<SeedMetrics>,
    pub progress_pct: MeanStd,
    pub success_pct: MeanStd,
    pub collision_pct: MeanStd,
    pub collision_back_pct: MeanStd,
    pub collision_front_pct: MeanStd,
    pub collision_side_pct: MeanStd,
    pub mdbc: MeanStd,
    pub ttc_within_bound_pct: MeanStd,
}

fn seed_metrics(seed: u64, rows: &[&ScenarioMetrics]) -> SeedMetrics {
    let n = rows.len() as f64;
    let pct = |k: usize| 100.0 * k as f64 / n;
    let count = |side: Side| rows.iter().filter(|r| r.collision_side == Some(side)).count();
    let collisions = rows.iter().filter(|r| r.collision_side.is_some()).count();
    let distance: f64 = rows.iter().map(|r| r.distance).sum();
    SeedMetrics {
        seed,
        scenarios: rows.len(),
        progress_pct: rows.iter().map(|r| r.progress).sum::<f64>() / n,
        success_pct: pct(rows.iter().filter(|r| r.success).count()),
        collision_pct: pct(collisions),
        collision_back_pct: pct(count(Side::Back)),
        collision_front_pct: pct(count(Side::Front)),
        collision_side_pct: pct(count(Side::Side)),
        distance,
        collisions,
        mdbc: (collisions > 0).then(|| distance / collisions as f64),
        ttc_within_bound_pct: pct(rows.iter().filter(|r| r.min_ttc >= TTC_BOUND).count()),
    }
}

/// Aggregates rows of one planner over scenarios and seeds.
pub fn compute_report(rows: &[ScenarioMetrics]) -> Result<MetricsReport> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Config("cannot report on an empty rollout set".into()))?;
    let mut by_seed: BTreeMap<u64, Vec<&ScenarioMetrics>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let per_seed: Vec<SeedMetrics> = by_seed.iter().map(|(&s, rs)| seed_metrics(s, rs)).collect();
    let col = |f: fn(&SeedMetrics) -> f64| MeanStd::finite(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        planner: first.planner.clone(),
        scenarios: per_seed[0].scenarios,
        progress_pct: col(|m| m.progress_pct),
        success_pct: col(|m| m.success_pct),
        collision_pct: col(|m| m.collision_pct),
        collision_back_pct: col(|m| m.collision_back_pct),
        collision_front_pct: col(|m| m.collision_front_pct),
        collision_side_pct: col(|m| m.collision_side_pct),
        mdbc: MeanStd::of(&per_seed.iter().map(|m| m.mdbc).collect::<Vec<_>>()),
        ttc_within_bound_pct: col(|m| m.ttc_within_bound_pct),
        per_seed,
    })
}

/// A planner instance under test: a display name, the seed it was trained
/// with, and the planner itself.
#[derive(Clone)]
pub struct BenchmarkEntry {
    pub name: String,
    pub seed: u64,
    pub planner: Arc<dyn Planner>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub rows: Vec<ScenarioMetrics>,
    pub reports: Vec<MetricsReport>,
}

pub fn check_disjoint(testset: &[ScenarioSpec], training_logs: &BTreeSet<String>) -> Result<()> {
    let overlap: Vec<&str> = testset
        .iter()
        .map(|s| s.log_id.as_str())
        .filter(|id| training_logs.contains(*id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::TrainTestOverlap(overlap.join(", ")))
    }
}

/// Runs every entry over every test scenario. Reports come out in order of
/// first appearance of each planner name.
pub fn run_benchmark(
    entries: &[BenchmarkEntry],
    testset: &[ScenarioSpec],
    ctx: &SimContext,
    rules: &ValidityRules,
    training_logs: &BTreeSet<String>,
) -> Result<BenchmarkOutput> {
    use rayon::prelude::*;
    check_disjoint(testset, training_logs)?;
    let jobs: Vec<(usize, usize)> = (0..entries.len())
        .flat_map(|e| (0..testset.len()).map(move |s| (e, s)))
        .collect();
    let rows: Vec<ScenarioMetrics> = jobs
        .par_iter()
        .map(|&(e, s)| {
            let entry = &entries[e];
            let sc = &testset[s];
            let log = ctx.log(&sc.log_id)?;
            let r = rollout_scenario(sc, entry.planner.as_ref(), rules, ctx, entry.seed)?;
            Ok(scenario_metrics(&entry.name, entry.seed, &r, log))
        })
        .collect::<Result<_>>()?;
    let mut names: Vec<&str> = Vec::new();
    for e in entries {
        if !names.contains(&e.name.as_str()) {
            names.push(&e.name);
        }
    }
    let reports = names
        .iter()
        .map(|n| {
            let subset: Vec<ScenarioMetrics> = rows.iter().filter(|r| r.planner == *n).cloned().collect();
            compute_report(&subset)
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkOutput { rows, reports })
}

pub const CSV_HEADER: &str = "planner,seed,scenario,outcome,progress,distance,collision_side,min_ttc";

pub fn rows_to_csv(rows: &[ScenarioMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{},{:.4}\n",
            r.planner,
            r.seed,
            r.scenario,
            r.outcome,
            r.progress,
            r.distance,
            r.collision_side.map_or("", Side::name),
            r.min_ttc
        ));
    }
    out
}

/// Plain-text results table, one row per planner.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = format!(
        "{:<14} {:>12} {:>12} {:>12} {:>24} {:>14} {:>12}\n",
        "planner", "progress", "success", "collision", "(back/front/side)", "mdbc", "ttc"
    );
    for r in reports {
        let breakdown = format!(
            "{}/{}/{}",
            r.collision_back_pct, r.collision_front_pct, r.collision_side_pct
        );
        out.push_str(&format!(
            "{:<14} {:>12} {:>12} {:>12} {:>24} {:>14} {:>12}\n",
            r.planner,
            r.progress_pct.to_string(),
            r.success_pct.to_string(),
            r.collision_pct.to_string(),
            breakdown,
            r.mdbc.to_string(),
            r.ttc_within_bound_pct.to_string()
        ));
    }
    out
}

pub fn write_benchmark(dir: &Path, out: &BenchmarkOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, rows_to_csv(&out.rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&out.reports)? + "\n";
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

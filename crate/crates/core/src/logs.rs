//! Recorded logs, the scripted expert, segmentation and dataset files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{idm_accel, IdmParams};
use crate::geometry::{normalize_angle, Vec2};
use crate::learn::{ExpertSample, Origin};
use crate::sampler::{expert_trajectory, generate_candidates, nearest_to_expert, vectorize_candidate, SamplerConfig};
use crate::sim::ScenarioSpec;
use crate::validity::{Checker, Future, ValidityRules, Variant};
use crate::world::{
    build_synthetic_world, vectorize_scene, AgentTrack, FeatureLayout, Footprint, LightPhase, RoutePath, Scene,
    SceneTensor, Template, TrackState, WorldGenSpec, WorldMap,
};

/// A recording. Every track has one state per tick from time 0; tracks run
/// `tail` seconds past `duration` so that windows ending at `duration` still
/// have a known future over the planning horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordedLog {
    pub id: String,
    pub template: String,
    pub seed: u64,
    pub map: Arc<WorldMap>,
    pub route: String,
    pub ego: AgentTrack,
    pub agents: Vec<AgentTrack>,
    pub dt: f64,
    pub duration: f64,
    #[serde(skip)]
    route_path: OnceLock<Arc<RoutePath>>,
}

impl RecordedLog {
    pub fn new(
        id: String,
        template: String,
        seed: u64,
        map: Arc<WorldMap>,
        route: String,
        ego: AgentTrack,
        agents: Vec<AgentTrack>,
        dt: f64,
        duration: f64,
    ) -> Result<Self> {
        let log = Self {
            id,
            template,
            seed,
            map,
            route,
            ego,
            agents,
            dt,
            duration,
            route_path: OnceLock::new(),
        };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        self.route_path()?;
        let ticks = self.duration_ticks() as usize + 1;
        self.ego.validate(self.dt)?;
        if self.ego.states.len() < ticks {
            return Err(Error::InvalidMap(format!("log {} ego track shorter than duration", self.id)));
        }
        for a in &self.agents {
            a.validate(self.dt)?;
            if a.states.len() != self.ego.states.len() {
                return Err(Error::InvalidMap(format!("log {} tracks differ in length", self.id)));
            }
        }
        Ok(())
    }

    pub fn duration_ticks(&self) -> i64 {
        (self.duration / self.dt).round() as i64
    }

    pub fn last_tick(&self) -> i64 {
        self.ego.states.len() as i64 - 1
    }

    pub fn route_path(&self) -> Result<Arc<RoutePath>> {
        if let Some(r) = self.route_path.get() {
            return Ok(r.clone());
        }
        let r = Arc::new(RoutePath::from_map(&self.map, &self.route)?);
        Ok(self.route_path.get_or_init(|| r).clone())
    }

    pub fn route_path_named(&self, name: &str) -> Result<Arc<RoutePath>> {
        if name == self.route {
            self.route_path()
        } else {
            Ok(Arc::new(RoutePath::from_map(&self.map, name)?))
        }
    }

    /// Scene at `tick` from the recorded ego states.
    pub fn scene_at(&self, tick: i64, h: usize) -> Result<Scene> {
        Ok(Scene::assemble(
            self.map.clone(),
            self.route_path()?,
            &self.ego.states,
            self.ego.footprint,
            &self.agents,
            tick,
            self.dt,
            h,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogTemplate {
    /// Two-lane straight road with a mid-block signal.
    StraightRoad,
    FourWay,
    TIntersection,
}

impl LogTemplate {
    pub fn name(self) -> &'static str {
        match self {
            LogTemplate::StraightRoad => "straight-road",
            LogTemplate::FourWay => "four-way",
            LogTemplate::TIntersection => "t-intersection",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogGenConfig {
    pub duration: f64,
    /// Extra recorded time after `duration`.
    pub tail: f64,
    pub dt: f64,
    pub max_retries: u32,
    pub straight: WorldGenSpec,
    pub junction: WorldGenSpec,
    pub idm: IdmParams,
    /// Expert acceleration limits.
    pub accel_min: f64,
    pub accel_max: f64,
    /// Lateral acceleration the expert plans curves for.
    pub curve_lat_accel: f64,
}

impl Default for LogGenConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            tail: 4.0,
            dt: 0.1,
            max_retries: 30,
            straight: WorldGenSpec {
                template: Template::StraightRoad,
                lanes: 2,
                length: crate::world::Span(850.0, 950.0),
                signalized: true,
                signal_cycle: crate::world::Span(30.0, 40.0),
                ..WorldGenSpec::default()
            },
            junction: WorldGenSpec {
                length: crate::world::Span(330.0, 380.0),
                ..WorldGenSpec::default()
            },
            idm: IdmParams::default(),
            accel_min: -3.5,
            accel_max: 2.0,
            curve_lat_accel: 1.8,
        }
    }
}

/// One vehicle in the recording simulation.
struct Vehicle {
    id: u32,
    footprint: Footprint,
    route: Arc<RoutePath>,
    /// Arc length along `route` (agents) or of the last projection (ego).
    s: f64,
    pos: Vec2,
    heading: f64,
    speed: f64,
    v0_factor: f64,
    /// Scripted stops: (start time, duration).
    stops: Vec<(f64, f64)>,
    /// Virtual stop position while a scripted stop is active.
    hold_at: Option<f64>,
    /// Stop lines on the route: (light index, arc length).
    lines: Vec<(usize, f64)>,
    /// Lights this vehicle has committed to passing.
    committed: BTreeSet<usize>,
    is_ego: bool,
    states: Vec<TrackState>,
}

impl Vehicle {
    fn new(
        id: u32,
        route: Arc<RoutePath>,
        s: f64,
        speed: f64,
        v0_factor: f64,
        map: &WorldMap,
        is_ego: bool,
    ) -> Self {
        let (pos, heading) = route.pose_at(s);
        let lines = map
            .traffic_lights
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                route
                    .crossing_s(l.stop_line[0], l.stop_line[1], 0.0, route.length())
                    .map(|s| (i, s))
            })
            .collect();
        Self {
            id,
            footprint: Footprint::CAR,
            route,
            s,
            pos,
            heading: normalize_angle(heading),
            speed,
            v0_factor,
            stops: Vec::new(),
            hold_at: None,
            lines,
            committed: BTreeSet::new(),
            is_ego,
            states: Vec::new(),
        }
    }

    fn record(&mut self, t: f64) {
        self.states.push(TrackState {
            t,
            pos: self.pos,
            heading: self.heading,
            speed: self.speed,
        });
    }

    fn half_len(&self) -> f64 {
        0.5 * self.footprint.length
    }
}

/// Speed that still allows slowing to every upcoming limit at `decel`.
fn anticipated_limit(route: &RoutePath, s: f64, factor: f64, decel: f64, curve_lat: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut ds = 0.0;
    while ds <= 60.0 {
        let limit = route.speed_limit_at(s + ds) * factor;
        best = best.min((limit * limit + 2.0 * decel * ds).sqrt());
        ds += 2.0;
    }
    // curvature of the route itself, sampled ahead
    let mut ds = 0.0;
    while ds <= 50.0 {
        let (a, _) = route.pose_at(s + ds);
        let (b, _) = route.pose_at(s + ds + 3.0);
        let (c, _) = route.pose_at(s + ds + 6.0);
        let kappa = crate::geometry::three_point_curvature(a, b, c);
        if kappa > 1e-3 {
            let v = (curve_lat / kappa).sqrt();
            best = best.min((v * v + 2.0 * decel * ds).sqrt());
        }
        ds += 2.0;
    }
    best
}

struct RecordingWorld<'a> {
    map: &'a WorldMap,
    cfg: &'a LogGenConfig,
    vehicles: Vec<Vehicle>,
}

impl RecordingWorld<'_> {
    /// Nearest obstacle ahead of vehicle `i`: (gap, obstacle speed).
    fn leader(&self, i: usize, t: f64) -> Option<(f64, f64)> {
        let me = &self.vehicles[i];
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |gap: f64, v: f64| {
            if best.map_or(true, |b| gap < b.0) {
                best = Some((gap, v));
            }
        };
        let look = 70.0;
        for (j, other) in self.vehicles.iter().enumerate() {
            if j == i || other.pos.distance(me.pos) > look + 10.0 {
                continue;
            }
            let proj = me.route.project_between(other.pos, me.s, me.s + look);
            if proj.s <= me.s + 0.1 {
                continue;
            }
            // skip vehicles heading across or against us unless they sit in our lane
            let (_, h) = me.route.pose_at(proj.s);
            let rel = normalize_angle(other.heading - h).abs();
            let lateral_clear = 0.5 * (me.footprint.width + other.footprint.width) + 0.4;
            if proj.distance > lateral_clear {
                continue;
            }
            let along = if rel < std::f64::consts::FRAC_PI_2 {
                other.speed * rel.cos()
            } else {
                0.0
            };
            let gap = proj.s - me.s - me.half_len() - 0.5 * other.footprint.length;
            consider(gap, along);
        }
        for &(li, s_line) in &me.lines {
            let gap = s_line - me.s - me.half_len() - 1.0;
            if gap < -me.half_len() || gap > 80.0 || me.committed.contains(&li) {
                continue;
            }
            let light = &self.map.traffic_lights[li];
            let phase = light.phase_at(t);
            let brake_dist = me.speed * me.speed / (2.0 * 3.0);
            let stop = match phase {
                LightPhase::Red => gap > -0.5 || brake_dist < gap + 2.0,
                LightPhase::Green => {
                    let ttc = light.time_to_change(t);
                    // time to clear the line accelerating at 1.5 m/s^2
                    let d = gap.max(0.0) + me.footprint.length + 1.0;
                    let arrive = ((me.speed * me.speed + 3.0 * d).sqrt() - me.speed) / 1.5;
                    arrive + 0.5 > ttc && brake_dist <= gap.max(0.0) + 1.0
                }
            };
            if stop {
                consider(gap.max(0.05), 0.0);
            }
        }
        if let Some(hold) = me.hold_at {
            consider((hold - me.s - me.half_len()).max(0.05), 0.0);
        }
        best
    }

    fn step(&mut self, t: f64) {
        let dt = self.cfg.dt;
        let idm = &self.cfg.idm;
        let decisions: Vec<(f64, Option<usize>)> = (0..self.vehicles.len())
            .map(|i| {
                let v = &self.vehicles[i];
                let v0 = anticipated_limit(&v.route, v.s, v.v0_factor, 1.5, self.cfg.curve_lat_accel).max(0.1);
                let leader = self.leader(i, t);
                let a = idm_accel(v.speed, v0, leader.map(|l| l.0), leader.map_or(0.0, |l| v.speed - l.1), idm);
                let (lo, hi) = if v.is_ego {
                    (self.cfg.accel_min, self.cfg.accel_max)
                } else {
                    (-6.0, 2.5)
                };
                // a light passed while green is committed once stopping gets uncomfortable
                let commit = v.lines.iter().find_map(|&(li, s_line)| {
                    let gap = s_line - v.s - v.half_len() - 1.0;
                    let light = &self.map.traffic_lights[li];
                    let close = gap < v.speed * v.speed / (2.0 * 3.0) && gap > -v.half_len();
                    (close && light.phase_at(t) == LightPhase::Green && !v.committed.contains(&li)).then_some(li)
                });
                (a.clamp(lo, hi), commit)
            })
            .collect();

        for (v, (a, commit)) in self.vehicles.iter_mut().zip(decisions) {
            if let Some(li) = commit {
                v.committed.insert(li);
            }
            let v1 = (v.speed + a * dt).max(0.0);
            let ds = 0.5 * (v.speed + v1) * dt;
            if v.is_ego {
                // pure pursuit on the route, kinematic bicycle
                let look = (0.8 * v.speed + 3.0).clamp(4.0, 15.0);
                let target = v.route.pose_at(v.s + look).0;
                let alpha = normalize_angle((target - v.pos).angle() - v.heading);
                let dist = target.distance(v.pos).max(1e-6);
                let curvature = 2.0 * alpha.sin() / dist;
                let heading = v.heading + ds * curvature;
                let mid = v.heading + 0.5 * ds * curvature;
                v.pos += Vec2::from_heading(mid) * ds;
                v.heading = normalize_angle(heading);
                v.s = v.route.project_between(v.pos, v.s - 5.0, v.s + 10.0).s;
            } else {
                v.s += ds;
                let (p, h) = v.route.pose_at(v.s);
                v.pos = p;
                v.heading = normalize_angle(h);
            }
            v.speed = v1;
        }

        let t1 = t + dt;
        for v in &mut self.vehicles {
            let active = v.stops.iter().any(|&(start, dur)| t1 >= start && t1 < start + dur);
            if active && v.hold_at.is_none() {
                v.hold_at = Some(v.s + v.half_len() + v.speed * v.speed / (2.0 * 2.0) + 0.5);
            } else if !active {
                v.hold_at = None;
            }
        }
    }
}

fn route_turn(route: &RoutePath) -> f64 {
    let (_, h0) = route.pose_at(0.0);
    let (_, h1) = route.pose_at(route.length());
    normalize_angle(h1 - h0)
}

fn straight_routes(map: &WorldMap) -> Vec<Arc<RoutePath>> {
    map.routes
        .keys()
        .filter_map(|name| RoutePath::from_map(map, name).ok())
        .filter(|r| route_turn(r).abs() < 0.3)
        .map(Arc::new)
        .collect()
}

/// Places the ego and background traffic for one attempt.
fn populate(map: &WorldMap, template: LogTemplate, rng: &mut ChaCha8Rng) -> Result<Vec<Vehicle>> {
    let names: Vec<&String> = map.routes.keys().collect();
    let ego_name = names[rng.gen_range(0..names.len())].clone();
    let ego_route = Arc::new(RoutePath::from_map(map, &ego_name)?);
    let limit = ego_route.speed_limit_at(0.0);
    let ego_s = rng.gen_range(15.0..40.0);
    let mut vehicles = vec![Vehicle::new(
        0,
        ego_route.clone(),
        ego_s,
        rng.gen_range(0.5..1.0) * limit,
        1.0,
        map,
        true,
    )];
    let mut next_id = 1;
    let mut add = |vehicles: &mut Vec<Vehicle>, route: Arc<RoutePath>, s: f64, speed: f64, factor: f64| {
        let v = Vehicle::new(next_id, route, s, speed, factor, map, false);
        next_id += 1;
        vehicles.push(v);
        vehicles.len() - 1
    };

    // leads on the ego route, some with scripted stops
    let leads = rng.gen_range(1..=2);
    let mut s = ego_s;
    for _ in 0..leads {
        s += rng.gen_range(25.0..70.0);
        let factor = rng.gen_range(0.6..0.95);
        let idx = add(&mut vehicles, ego_route.clone(), s, factor * limit * 0.8, factor);
        if rng.gen_bool(0.7) {
            let start = rng.gen_range(5.0..45.0);
            let dur = rng.gen_range(3.0..9.0);
            vehicles[idx].stops.push((start, dur));
        }
    }
    if rng.gen_bool(0.6) {
        let back = rng.gen_range(12.0..25.0);
        if ego_s - back > 0.0 {
            add(&mut vehicles, ego_route.clone(), ego_s - back, 0.7 * limit, 1.0);
        } else {
            add(&mut vehicles, ego_route.clone(), 0.0, 0.5 * limit, 1.0);
        }
    }

    match template {
        LogTemplate::StraightRoad => {
            for name in &names {
                if **name == ego_name {
                    continue;
                }
                let route = Arc::new(RoutePath::from_map(map, name)?);
                let mut s = rng.gen_range(0.0..30.0);
                for _ in 0..rng.gen_range(2..=4) {
                    let factor = rng.gen_range(0.7..1.0);
                    add(&mut vehicles, route.clone(), s, factor * limit, factor);
                    s += rng.gen_range(30.0..80.0);
                }
            }
        }
        LogTemplate::FourWay | LogTemplate::TIntersection => {
            let ego_turn = route_turn(&ego_route);
            let ego_from = ego_name.split('→').next().unwrap_or("").to_string();
            for route in straight_routes(map) {
                let from = route.name.split('→').next().unwrap_or("").to_string();
                if from == ego_from {
                    continue;
                }
                let (start, _) = route.pose_at(0.0);
                let (ego_start, _) = ego_route.pose_at(0.0);
                let opposite = (start + ego_start).norm() < 0.25 * start.norm();
                // oncoming straight traffic conflicts with a left turn
                if opposite && ego_turn > 0.3 {
                    continue;
                }
                let mut s = rng.gen_range(0.0..40.0);
                for _ in 0..rng.gen_range(1..=3) {
                    let factor = rng.gen_range(0.7..1.0);
                    add(&mut vehicles, route.clone(), s, factor * limit, factor);
                    s += rng.gen_range(35.0..90.0);
                }
            }
        }
    }
    Ok(vehicles)
}

fn record_attempt(
    map: Arc<WorldMap>,
    template: LogTemplate,
    cfg: &LogGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vehicle>, usize)> {
    let vehicles = populate(&map, template, rng)?;
    let mut world = RecordingWorld {
        map: &map,
        cfg,
        vehicles,
    };
    let total = ((cfg.duration + cfg.tail) / cfg.dt).round() as usize;
    for k in 0..=total {
        let t = k as f64 * cfg.dt;
        for v in &mut world.vehicles {
            v.record(t);
        }
        if k < total {
            world.step(t);
        }
    }
    Ok((world.vehicles, total))
}

/// Checks the recorded ego against variant C at every replan-aligned tick.
fn expert_is_valid(log: &RecordedLog, rules: &ValidityRules, steps: usize, replan: usize, h: usize) -> Result<bool> {
    let rules = rules.with_variant(Variant::C);
    let last = log.duration_ticks();
    let route = log.route_path()?;
    let mut tick = 0;
    while tick <= last {
        let Some(traj) = expert_trajectory(&log.ego.states, tick as usize, steps, log.dt) else {
            break;
        };
        let scene = log.scene_at(tick, h)?;
        let future = Future {
            agents: &log.agents,
            ego_history: &log.ego.states[..=tick as usize],
        };
        let checker = Checker::new(&scene, &future, &rules, steps, log.dt);
        let verdict = checker.verdict(&traj);
        if !verdict.valid {
            log::debug!("log {} rejected at tick {tick}: {:?}", log.id, verdict.violations);
            return Ok(false);
        }
        if route.project(traj.end().pos).distance > 2.0 {
            return Ok(false);
        }
        tick += replan as i64;
    }
    Ok(true)
}

/// Records a log for `template` driven by the scripted expert. Attempts that
/// are not mistake-free under variant C are discarded and regenerated.
pub fn run_scripted_expert(
    template: LogTemplate,
    cfg: &LogGenConfig,
    rules: &ValidityRules,
    sampler: &SamplerConfig,
    replan_ticks: usize,
    id: &str,
    seed: u64,
) -> Result<RecordedLog> {
    let spec = match template {
        LogTemplate::StraightRoad => cfg.straight.clone(),
        LogTemplate::FourWay => WorldGenSpec {
            template: Template::FourWay,
            ..cfg.junction.clone()
        },
        LogTemplate::TIntersection => WorldGenSpec {
            template: Template::TIntersection,
            ..cfg.junction.clone()
        },
    };
    for attempt in 0..cfg.max_retries {
        let attempt_seed = seed.wrapping_mul(1_000_003).wrapping_add(attempt as u64);
        let map = Arc::new(build_synthetic_world(&spec, attempt_seed)?);
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed ^ 0x5eed);
        let (mut vehicles, _) = record_attempt(map.clone(), template, cfg, &mut rng)?;
        let ego = vehicles.remove(0);
        let route_len = ego.route.length();
        // the ego must stay on its route with room for a planning horizon
        let last_s = ego.route.project(ego.states.last().unwrap().pos).s;
        if last_s > route_len - 20.0 {
            continue;
        }
        let agents = vehicles
            .into_iter()
            .map(|v| AgentTrack {
                agent_id: v.id,
                footprint: v.footprint,
                states: v.states,
            })
            .collect();
        let log = RecordedLog::new(
            id.to_string(),
            template.name().to_string(),
            attempt_seed,
            map,
            ego.route.name.clone(),
            AgentTrack {
                agent_id: 0,
                footprint: ego.footprint,
                states: ego.states,
            },
            agents,
            cfg.dt,
            cfg.duration,
        )?;
        if expert_is_valid(&log, rules, sampler.steps(), replan_ticks, 10)? {
            return Ok(log);
        }
    }
    Err(Error::ExpertFailed {
        template: template.name().to_string(),
        retries: cfg.max_retries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub window: f64,
    pub stride: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 12.0,
            stride: 2.5,
        }
    }
}

/// Fixed-length windows starting at multiples of the stride.
pub fn segment_log(log: &RecordedLog, cfg: &SegmentationConfig) -> Result<Vec<ScenarioSpec>> {
    if !(cfg.stride > 0.0 && cfg.stride <= cfg.window) {
        return Err(Error::Config("segmentation needs 0 < stride <= window".into()));
    }
    if log.duration + 1e-9 < cfg.window {
        return Err(Error::LogTooShort {
            log: format!("{} ({})", log.id, log.template),
            duration: log.duration,
            window: cfg.window,
        });
    }
    let route = log.route_path()?;
    let tick_of = |t: f64| (t / log.dt).round() as usize;
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let start = k as f64 * cfg.stride;
        let end = start + cfg.window;
        if end > log.duration + 1e-9 {
            break;
        }
        let start_s = route.project(log.ego.states[tick_of(start)].pos).s;
        let goal_s = route.project(log.ego.states[tick_of(end)].pos).s;
        out.push(ScenarioSpec {
            log_id: log.id.clone(),
            start,
            end,
            route: log.route.clone(),
            start_s,
            goal_s,
        });
        k += 1;
    }
    Ok(out)
}

/// Rounds to nine significant digits, the precision of dataset files.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().unwrap()
}

fn quantize_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let q = quantize(n.as_f64().unwrap());
            if let Some(q) = serde_json::Number::from_f64(q) {
                *n = q;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(quantize_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(quantize_json),
        _ => {}
    }
}

/// The record as it reads back from a dataset file.
pub fn quantized<T: DatasetRecord>(record: &T) -> Result<T> {
    let mut v = serde_json::to_value(record)?;
    quantize_json(&mut v);
    Ok(serde_json::from_value(v)?)
}

pub fn quantize_tensor(t: &mut SceneTensor) {
    for v in &mut t.features {
        *v = quantize(*v);
    }
}

pub fn quantize_rows(rows: &mut [Vec<f64>]) {
    for r in rows {
        for v in r.iter_mut() {
            *v = quantize(*v);
        }
    }
}

/// Decision ticks of a scenario, every `replan` ticks from its start while
/// the expert future covers the horizon.
pub fn decision_ticks(spec: &ScenarioSpec, dt: f64, replan: usize) -> Vec<i64> {
    let start = (spec.start / dt).round() as i64;
    let end = (spec.end / dt).round() as i64;
    (start..end).step_by(replan.max(1)).collect()
}

/// Expert-labelled samples for every decision time of every scenario,
/// deduplicated by (log, tick) and sorted.
pub fn build_expert_dataset(
    logs: &[RecordedLog],
    scenarios: &[ScenarioSpec],
    sampler: &SamplerConfig,
    layout: &FeatureLayout,
    replan: usize,
) -> Result<Vec<ExpertSample>> {
    let steps = sampler.steps();
    let mut keys: BTreeSet<(usize, i64)> = BTreeSet::new();
    for sc in scenarios {
        let li = logs
            .iter()
            .position(|l| l.id == sc.log_id)
            .ok_or_else(|| Error::MissingPrerequisite(format!("log {}", sc.log_id)))?;
        for tick in decision_ticks(sc, logs[li].dt, replan) {
            if tick + steps as i64 <= logs[li].last_tick() {
                keys.insert((li, tick));
            }
        }
    }
    let keys: Vec<(usize, i64)> = keys.into_iter().collect();
    use rayon::prelude::*;
    keys.par_iter()
        .map(|&(li, tick)| {
            let log = &logs[li];
            let scene = log.scene_at(tick, layout.history)?;
            let cands = generate_candidates(&scene, sampler)?;
            let expert = expert_trajectory(&log.ego.states, tick as usize, steps, log.dt)
                .expect("tick range checked above");
            let expert_index = nearest_to_expert(&cands, &expert)?;
            let mut tensor = vectorize_scene(&scene, layout)?;
            quantize_tensor(&mut tensor);
            let mut vecs: Vec<Vec<f64>> = cands.candidates.iter().map(|c| vectorize_candidate(c, layout)).collect();
            quantize_rows(&mut vecs);
            Ok(ExpertSample {
                origin: Origin {
                    log: log.id.clone(),
                    tick,
                },
                scene: tensor,
                cands: vecs,
                expert_index,
            })
        })
        .collect()
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub kind: String,
    pub samples: usize,
    pub scenarios: usize,
    pub config_hash: String,
    pub seed_lineage: Vec<u64>,
    pub layout: String,
    pub logs: Vec<String>,
}

/// Record types stored in dataset files.
pub trait DatasetRecord: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl DatasetRecord for ExpertSample {
    const KIND: &'static str = "expert";
}

impl DatasetRecord for crate::learn::FailureSample {
    const KIND: &'static str = "failure";
}

impl DatasetRecord for RecordedLog {
    const KIND: &'static str = "logs";
}

impl DatasetRecord for ScenarioSpec {
    const KIND: &'static str = "scenarios";
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Writes records as JSON lines, then the manifest next to them.
pub fn write_dataset<T: DatasetRecord>(path: &Path, records: &[T], manifest: &DatasetManifest) -> Result<()> {
    if manifest.kind != T::KIND || manifest.samples != records.len() {
        return Err(Error::SchemaMismatch(format!(
            "manifest describes {} {} records, writing {} {}",
            manifest.samples,
            manifest.kind,
            records.len(),
            T::KIND
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let mut v = serde_json::to_value(r)?;
        quantize_json(&mut v);
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::SchemaMismatch(format!(
            "{} has schema version {version:?}, expected {SCHEMA_VERSION}",
            mpath.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::SchemaMismatch(e.to_string()))
}

/// Reads records and checks them against the manifest.
pub fn read_dataset<T: DatasetRecord>(path: &Path) -> Result<(Vec<T>, DatasetManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.kind != T::KIND {
        return Err(Error::SchemaMismatch(format!(
            "{} holds {} records, expected {}",
            path.display(),
            manifest.kind,
            T::KIND
        )));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(manifest.samples);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::SchemaMismatch(e.to_string()))?);
    }
    if out.len() != manifest.samples {
        return Err(Error::CountMismatch {
            manifest: manifest.samples,
            actual: out.len(),
        });
    }
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{PhaseSpan, Span};

    fn straight_map(signalized: bool) -> Arc<WorldMap> {
        let spec = WorldGenSpec {
            speed_limit: Span::fixed(12.0),
            signalized,
            ..WorldGenSpec::straight(1, 1500.0)
        };
        Arc::new(build_synthetic_world(&spec, 3).unwrap())
    }

    fn only_route(map: &WorldMap) -> Arc<RoutePath> {
        let name = map.routes.keys().next().unwrap();
        Arc::new(RoutePath::from_map(map, name).unwrap())
    }

    fn simulate(map: &WorldMap, vehicles: Vec<Vehicle>, cfg: &LogGenConfig, seconds: f64) -> Vec<Vehicle> {
        let mut world = RecordingWorld { map, cfg, vehicles };
        let ticks = (seconds / cfg.dt).round() as usize;
        for k in 0..=ticks {
            let t = k as f64 * cfg.dt;
            for v in &mut world.vehicles {
                v.record(t);
            }
            if k < ticks {
                world.step(t);
            }
        }
        world.vehicles
    }

    #[test]
    fn free_road_settles_at_limit() {
        let map = straight_map(false);
        let route = only_route(&map);
        let cfg = LogGenConfig::default();
        let ego = Vehicle::new(0, route, 20.0, 0.0, 1.0, &map, true);
        let out = simulate(&map, vec![ego], &cfg, 60.0);
        let v = out[0].states.last().unwrap().speed;
        // IDM free-road equilibrium is v = v0
        assert!((v - 12.0).abs() < 0.1, "terminal speed {v}");
    }

    #[test]
    fn follows_constant_speed_lead() {
        let map = straight_map(false);
        let route = only_route(&map);
        let cfg = LogGenConfig::default();
        let ego = Vehicle::new(0, route.clone(), 20.0, 10.0, 1.0, &map, true);
        let lead = Vehicle::new(1, route, 80.0, 5.0, 5.0 / 12.0, &map, false);
        let out = simulate(&map, vec![ego, lead], &cfg, 60.0);

        // independent 1-D IDM integration of the same pair
        let p = cfg.idm;
        let (mut xe, mut ve, mut xl) = (20.0_f64, 10.0_f64, 80.0_f64);
        for _ in 0..600 {
            let gap = xl - xe - Footprint::CAR.length;
            let s_star = p.s0 + (ve * p.time_headway + ve * (ve - 5.0) / (2.0 * (p.a_max * p.b).sqrt())).max(0.0);
            let a = (p.a_max * (1.0 - (ve / 12.0).powf(p.delta) - (s_star / gap).powi(2))).clamp(cfg.accel_min, cfg.accel_max);
            let v1 = (ve + a * cfg.dt).max(0.0);
            xe += 0.5 * (ve + v1) * cfg.dt;
            ve = v1;
            xl += 5.0 * cfg.dt;
        }
        let e = out[0].states.last().unwrap();
        let l = out[1].states.last().unwrap();
        assert!((e.speed - 5.0).abs() < 0.1, "ego speed {}", e.speed);
        assert!((e.speed - ve).abs() < 0.05, "ego {} oracle {ve}", e.speed);
        let gap = e.pos.distance(l.pos) - Footprint::CAR.length;
        assert!(gap > 0.0);
        assert!((gap - (xl - xe - Footprint::CAR.length)).abs() < 0.5);
    }

    #[test]
    fn stops_for_red_light() {
        let mut map = (*straight_map(true)).clone();
        for l in &mut map.traffic_lights {
            l.schedule = vec![PhaseSpan {
                phase: LightPhase::Red,
                start: 0.0,
                end: 1000.0,
            }];
        }
        let map = Arc::new(map);
        let route = only_route(&map);
        let cfg = LogGenConfig::default();
        let ego = Vehicle::new(0, route.clone(), 20.0, 12.0, 1.0, &map, true);
        let (_, line_s) = ego.lines[0];
        let out = simulate(&map, vec![ego], &cfg, 80.0);
        let half = 0.5 * Footprint::CAR.length;
        for st in &out[0].states {
            assert!(route.project(st.pos).s + half < line_s, "crossed the stop line at t={}", st.t);
        }
        assert!(out[0].states.last().unwrap().speed < 0.05);
    }

    fn small_log(template: LogTemplate, seed: u64) -> RecordedLog {
        let cfg = LogGenConfig {
            duration: 20.0,
            ..LogGenConfig::default()
        };
        run_scripted_expert(template, &cfg, &ValidityRules::default(), &SamplerConfig::default(), 5, "t", seed).unwrap()
    }

    #[test]
    fn scripted_expert_is_deterministic_and_valid() {
        for t in [LogTemplate::StraightRoad, LogTemplate::FourWay, LogTemplate::TIntersection] {
            let a = small_log(t, 11);
            let b = small_log(t, 11);
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(a.template, t.name());
            assert!(expert_is_valid(&a, &ValidityRules::default(), 30, 5, 10).unwrap());
        }
    }

    /// Ego cruising at 8 m/s down a straight road, no other traffic.
    fn cruise_log(duration: f64) -> RecordedLog {
        let map = straight_map(false);
        let route = only_route(&map);
        let n = ((duration + 4.0) / 0.1).round() as usize;
        let states: Vec<TrackState> = (0..=n)
            .map(|k| {
                let t = k as f64 * 0.1;
                let (pos, heading) = route.pose_at(30.0 + 8.0 * t);
                TrackState { t, pos, heading, speed: 8.0 }
            })
            .collect();
        let ego = AgentTrack {
            agent_id: 0,
            footprint: Footprint::CAR,
            states,
        };
        RecordedLog::new("c".into(), "straight-road".into(), 0, map, route.name.clone(), ego, vec![], 0.1, duration).unwrap()
    }

    #[test]
    fn segmentation_counts() {
        let long = cruise_log(60.0);
        let s3 = segment_log(&long, &SegmentationConfig { window: 12.0, stride: 3.0 }).unwrap();
        assert_eq!(s3.len(), 17);
        assert_eq!((s3[0].start, s3[0].end), (0.0, 12.0));
        assert_eq!((s3[1].start, s3[1].end), (3.0, 15.0));
        assert_eq!((s3[16].start, s3[16].end), (48.0, 60.0));

        let s25 = segment_log(&long, &SegmentationConfig::default()).unwrap();
        assert_eq!(s25.len(), 20);
        assert_eq!(s25.last().unwrap().start, 47.5);
        for sc in &s25 {
            assert!(sc.start >= 0.0 && sc.end <= long.duration + 1e-9);
            assert!((sc.goal_s - sc.start_s - 96.0).abs() < 1e-6);
        }

        let exact = segment_log(&cruise_log(12.0), &SegmentationConfig::default()).unwrap();
        assert_eq!(exact.len(), 1);
        assert!(matches!(
            segment_log(&cruise_log(11.9), &SegmentationConfig::default()),
            Err(Error::LogTooShort { .. })
        ));
    }

    #[test]
    fn decision_ticks_per_window() {
        let sc = ScenarioSpec {
            log_id: "x".into(),
            start: 2.5,
            end: 14.5,
            route: "r".into(),
            start_s: 0.0,
            goal_s: 100.0,
        };
        let ticks = decision_ticks(&sc, 0.1, 5);
        assert_eq!(ticks.len(), 24);
        assert_eq!(ticks[0], 25);
        assert_eq!(*ticks.last().unwrap(), 140);
    }

    #[test]
    fn straight_constant_speed_expert_labels_zero_accel_zero_offset() {
        let log = cruise_log(36.0);
        let sampler = SamplerConfig::default();
        let zero_a = sampler.accel_levels.iter().position(|&a| a == 0.0).unwrap();
        let zero_o = sampler.lateral_offsets.iter().position(|&o| o == 0.0).unwrap();
        let sc = segment_log(&log, &SegmentationConfig::default()).unwrap();
        let samples = build_expert_dataset(&[log.clone()], &sc[..1], &sampler, &FeatureLayout::default(), 5).unwrap();
        assert_eq!(samples.len(), 24);
        for s in &samples {
            assert_eq!(s.expert_index, sampler.index_of(zero_a, zero_o), "tick {}", s.origin.tick);
        }
        let again = build_expert_dataset(&[log], &sc[..1], &sampler, &FeatureLayout::default(), 5).unwrap();
        assert_eq!(serde_json::to_string(&samples).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn quantize_keeps_nine_digits() {
        assert_eq!(quantize(0.0), 0.0);
        assert_eq!(quantize(1.234567891234), 1.23456789);
        assert_eq!(quantize(-9.87654321987e-5), -9.87654322e-5);
        let q = quantize(std::f64::consts::PI);
        assert_eq!(quantize(q), q);
    }

    fn manifest(kind: &str, n: usize) -> DatasetManifest {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            samples: n,
            scenarios: 1,
            config_hash: "abc".into(),
            seed_lineage: vec![1, 2],
            layout: "l".into(),
            logs: vec!["a".into()],
        }
    }

    fn scenarios(n: usize) -> Vec<ScenarioSpec> {
        (0..n)
            .map(|i| ScenarioSpec {
                log_id: format!("log-{i}"),
                start: 0.1 * i as f64 + 1.0 / 3.0,
                end: 12.0,
                route: "a→b".into(),
                start_s: 1e-7 * i as f64,
                goal_s: 123.456789,
            })
            .collect()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let recs = scenarios(5);
        write_dataset(&path, &recs, &manifest("scenarios", 5)).unwrap();
        let (back, m): (Vec<ScenarioSpec>, _) = read_dataset(&path).unwrap();
        let expect: Vec<ScenarioSpec> = recs.iter().map(|r| quantized(r).unwrap()).collect();
        assert_eq!(back, expect);
        assert!((back[1].start - recs[1].start).abs() < 1e-8);
        assert_eq!(m, manifest("scenarios", 5));
        // every float in the file carries at most nine significant digits
        let text = std::fs::read_to_string(&path).unwrap();
        for tok in text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == '-')) {
            if tok.contains('.') {
                let mantissa = tok.split('e').next().unwrap();
                let digits = mantissa.chars().filter(char::is_ascii_digit).collect::<String>();
                assert!(digits.trim_start_matches('0').len() <= 9, "{tok}");
            }
        }
        // wrong record type
        assert!(matches!(read_dataset::<ExpertSample>(&path), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn tampered_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_dataset(&path, &scenarios(3), &manifest("scenarios", 3)).unwrap();
        let mp = manifest_path(&path);
        let text = std::fs::read_to_string(&mp).unwrap().replace("\"samples\": 3", "\"samples\": 4");
        std::fs::write(&mp, text).unwrap();
        assert!(matches!(
            read_dataset::<ScenarioSpec>(&path),
            Err(Error::CountMismatch { manifest: 4, actual: 3 })
        ));
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut m = manifest("scenarios", 2);
        m.schema_version = 99;
        write_dataset(&path, &scenarios(2), &m).unwrap();
        assert!(matches!(read_dataset::<ScenarioSpec>(&path), Err(Error::SchemaMismatch(_))));
    }
}

//! Scene snapshots and their ego-centric vectorised encoding.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::map::{LightPhase, WorldMap};
use super::route::RoutePath;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, point_segment_distance, Frame, OrientedRect, Vec2};
use crate::logs::RecordedLog;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub const CAR: Footprint = Footprint {
        length: 4.6,
        width: 1.9,
    };

    pub fn rect(&self, pos: Vec2, heading: f64) -> OrientedRect {
        OrientedRect::new(pos, heading, self.length, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub t: f64,
    pub pos: Vec2,
    pub heading: f64,
    pub speed: f64,
}

/// A recorded vehicle. `states[i]` is the state at tick `i` of the owning log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub footprint: Footprint,
    pub states: Vec<TrackState>,
}

impl AgentTrack {
    /// State at `tick`, held at the first/last recorded state outside the track.
    pub fn state_at(&self, tick: i64) -> TrackState {
        let last = self.states.len() as i64 - 1;
        self.states[tick.clamp(0, last) as usize]
    }

    pub fn rect_at(&self, tick: i64) -> OrientedRect {
        let s = self.state_at(tick);
        self.footprint.rect(s.pos, s.heading)
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.footprint.length > 0.0 && self.footprint.width > 0.0) {
            return Err(Error::InvalidMap(format!("agent {} footprint", self.agent_id)));
        }
        for (i, s) in self.states.iter().enumerate() {
            if !(s.speed >= 0.0) || (s.t - i as f64 * dt).abs() > 1e-6 {
                return Err(Error::InvalidMap(format!(
                    "agent {} state {i} violates the tick grid or speed >= 0",
                    self.agent_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub footprint: Footprint,
    pub t: f64,
}

impl EgoState {
    pub fn rect(&self) -> OrientedRect {
        self.footprint.rect(self.position, self.heading)
    }
}

/// `H` states ending at the scene time, oldest first. Entries before the
/// start of the recording are padding (`mask == false`).
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub states: Vec<TrackState>,
    pub mask: Vec<bool>,
}

impl History {
    fn from_fn(h: usize, tick: i64, state: impl Fn(i64) -> TrackState) -> Self {
        let mut states = Vec::with_capacity(h);
        let mut mask = Vec::with_capacity(h);
        for k in 0..h as i64 {
            let tk = tick - (h as i64 - 1) + k;
            states.push(state(tk.max(0)));
            mask.push(tk >= 0);
        }
        Self { states, mask }
    }

    pub fn current(&self) -> &TrackState {
        self.states.last().expect("history is never empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentHistory {
    pub agent_id: u32,
    pub footprint: Footprint,
    pub history: History,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightState {
    pub light_id: u32,
    pub phase: LightPhase,
    pub time_to_change: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub map: Arc<WorldMap>,
    pub route: Arc<RoutePath>,
    pub ego: EgoState,
    pub ego_history: History,
    pub agent_histories: Vec<AgentHistory>,
    pub light_phases: Vec<LightState>,
    pub t: f64,
    pub tick: i64,
}

impl Scene {
    /// Assembles a scene at `tick` from an ego state sequence indexed by tick
    /// (at least `tick + 1` long) and recorded agent tracks.
    pub fn assemble(
        map: Arc<WorldMap>,
        route: Arc<RoutePath>,
        ego_states: &[TrackState],
        ego_footprint: Footprint,
        agents: &[AgentTrack],
        tick: i64,
        dt: f64,
        h: usize,
    ) -> Scene {
        assert!(h >= 1 && (tick as usize) < ego_states.len());
        let cur = ego_states[tick as usize];
        let accel = if tick > 0 {
            (cur.speed - ego_states[tick as usize - 1].speed) / dt
        } else {
            0.0
        };
        let ego = EgoState {
            position: cur.pos,
            heading: normalize_angle(cur.heading),
            speed: cur.speed,
            accel,
            footprint: ego_footprint,
            t: tick as f64 * dt,
        };
        let ego_history = History::from_fn(h, tick, |k| ego_states[k as usize]);
        let agent_histories = agents
            .iter()
            .map(|a| AgentHistory {
                agent_id: a.agent_id,
                footprint: a.footprint,
                history: History::from_fn(h, tick, |k| a.state_at(k)),
            })
            .collect();
        let t = tick as f64 * dt;
        let light_phases = map
            .traffic_lights
            .iter()
            .map(|l| LightState {
                light_id: l.id,
                phase: l.phase_at(t),
                time_to_change: l.time_to_change(t),
            })
            .collect();
        Scene {
            map,
            route,
            ego,
            ego_history,
            agent_histories,
            light_phases,
            t,
            tick,
        }
    }

    pub fn ego_projection(&self) -> super::route::RouteProjection {
        self.route.project(self.ego.position)
    }
}

/// Scene at time `t` of a recorded log, with `h`-tick histories.
pub fn snapshot_scene(log: &RecordedLog, t: f64, route: &str, h: usize) -> Result<Scene> {
    if h == 0 {
        return Err(Error::Config("history length must be >= 1".into()));
    }
    let end = log.duration;
    if !(t >= -1e-9 && t <= end + 1e-9) {
        return Err(Error::OutOfRange { t, start: 0.0, end });
    }
    let tick = (t / log.dt).round() as i64;
    let route = log.route_path_named(route)?;
    Ok(Scene::assemble(
        log.map.clone(),
        route,
        &log.ego.states,
        log.ego.footprint,
        &log.agents,
        tick,
        log.dt,
        h,
    ))
}

/// Number of features per row: segment endpoints, a five-way type one-hot,
/// and two scalar attributes.
pub const FEATURE_DIM: usize = 11;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "x0", "y0", "x1", "y1", "lane", "agent", "ego", "route", "light", "speed", "width",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Lane,
    Agent,
    Ego,
    Route,
    Light,
}

impl RowKind {
    fn slot(self) -> usize {
        4 + self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureLayout {
    /// Maximum number of rows N.
    pub max_rows: usize,
    /// History length H in ticks.
    pub history: usize,
    /// Tick stride between history polyline vertices.
    pub history_stride: usize,
    pub crop_radius: f64,
    pub map_segment_len: f64,
    pub max_agents: usize,
    pub pos_scale: f64,
    pub speed_scale: f64,
    pub width_scale: f64,
    /// Waypoints D kept per candidate trajectory.
    pub waypoints: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            max_rows: 256,
            history: 10,
            history_stride: 3,
            crop_radius: 30.0,
            map_segment_len: 10.0,
            max_agents: 8,
            pos_scale: 0.1,
            speed_scale: 0.1,
            width_scale: 0.25,
            waypoints: 6,
        }
    }
}

impl FeatureLayout {
    pub fn descriptor(&self) -> LayoutDescriptor {
        LayoutDescriptor {
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            max_rows: self.max_rows,
            waypoints: self.waypoints,
        }
    }
}

/// Serialisable summary of a feature layout, stored alongside datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutDescriptor {
    pub names: Vec<String>,
    pub max_rows: usize,
    pub waypoints: usize,
}

impl fmt::Display for LayoutDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v1;rows={};waypoints={};{}", self.max_rows, self.waypoints, self.names.join(","))
    }
}

impl FromStr for LayoutDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::SchemaMismatch(format!("bad layout descriptor {s:?}"));
        let mut parts = s.split(';');
        if parts.next() != Some("v1") {
            return Err(bad());
        }
        let mut field = |key: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let max_rows = field("rows=")?;
        let waypoints = field("waypoints=")?;
        let names: Vec<String> = parts.next().ok_or_else(bad)?.split(',').map(str::to_string).collect();
        if names.len() != FEATURE_DIM {
            return Err(bad());
        }
        Ok(Self { names, max_rows, waypoints })
    }
}

/// Row-major `rows x FEATURE_DIM` features. Rows past `mask.len()` are
/// implicitly masked and zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTensor {
    pub capacity: usize,
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SceneTensor {
    pub fn stored_rows(&self) -> usize {
        self.mask.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn active_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Full `capacity`-row mask.
    pub fn full_mask(&self) -> Vec<bool> {
        let mut m = self.mask.clone();
        m.resize(self.capacity, false);
        m
    }

    pub fn is_consistent(&self) -> bool {
        self.features.len() == self.mask.len() * FEATURE_DIM
            && self.mask.len() <= self.capacity
            && self.features.iter().all(|v| v.is_finite())
            && self
                .mask
                .iter()
                .enumerate()
                .all(|(i, &m)| m || self.row(i).iter().all(|&v| v == 0.0))
    }
}

/// A precomputed map vector in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MapVector {
    pub a: Vec2,
    pub b: Vec2,
    pub speed: f64,
    pub width: f64,
}

fn resample(points: &[Vec2], piece: f64) -> Vec<(Vec2, Vec2)> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + w[0].distance(w[1]));
    }
    let len = *cum.last().unwrap();
    let at = |s: f64| -> Vec2 {
        let i = cum.partition_point(|&c| c <= s).clamp(1, points.len() - 1) - 1;
        let seg = cum[i + 1] - cum[i];
        points[i].lerp(points[i + 1], if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 })
    };
    let n = (len / piece).ceil().max(1.0) as usize;
    (0..n)
        .map(|k| {
            let s0 = k as f64 * piece;
            let s1 = ((k + 1) as f64 * piece).min(len);
            (at(s0), at(s1))
        })
        .collect()
}

fn lane_vectors(map: &WorldMap, piece: f64) -> Vec<MapVector> {
    map.lanes
        .iter()
        .flat_map(|lane| {
            resample(&lane.centerline, piece).into_iter().map(|(a, b)| MapVector {
                a,
                b,
                speed: lane.speed_limit,
                width: lane.width,
            })
        })
        .collect()
}

fn map_vectors(map: &WorldMap, piece: f64) -> std::borrow::Cow<'_, [MapVector]> {
    let cached = map.vectors.get_or_init(|| (piece, lane_vectors(map, piece)));
    if cached.0 == piece {
        std::borrow::Cow::Borrowed(&cached.1)
    } else {
        std::borrow::Cow::Owned(lane_vectors(map, piece))
    }
}

struct RowWriter<'a> {
    frame: Frame,
    layout: &'a FeatureLayout,
    features: Vec<f64>,
}

impl RowWriter<'_> {
    fn push(&mut self, kind: RowKind, a: Vec2, b: Vec2, speed: f64, width: f64) {
        let la = self.frame.to_local(a) * self.layout.pos_scale;
        let lb = self.frame.to_local(b) * self.layout.pos_scale;
        let mut row = [0.0; FEATURE_DIM];
        row[0] = la.x;
        row[1] = la.y;
        row[2] = lb.x;
        row[3] = lb.y;
        row[kind.slot()] = 1.0;
        row[9] = speed;
        row[10] = width;
        self.features.extend_from_slice(&row);
    }

    fn history(&mut self, kind: RowKind, hist: &History, width: f64) {
        let stride = self.layout.history_stride.max(1);
        let n = hist.states.len();
        let mut idx: Vec<usize> = (0..n).rev().step_by(stride).filter(|&i| hist.mask[i]).collect();
        idx.reverse();
        for w in idx.windows(2) {
            let (old, new) = (hist.states[w[0]], hist.states[w[1]]);
            self.push(
                kind,
                old.pos,
                new.pos,
                new.speed * self.layout.speed_scale,
                width * self.layout.width_scale,
            );
        }
    }
}

/// Encodes `scene` in the ego frame: lane vectors, route vectors, stop lines,
/// ego history and agent histories, in that order.
pub fn vectorize_scene(scene: &Scene, layout: &FeatureLayout) -> Result<SceneTensor> {
    let ego = scene.ego.position;
    let radius = layout.crop_radius;
    let mut w = RowWriter {
        frame: Frame::new(ego, scene.ego.heading),
        layout,
        features: Vec::new(),
    };
    let within = |a: Vec2, b: Vec2| point_segment_distance(ego, a, b).0 <= radius;

    for v in map_vectors(&scene.map, layout.map_segment_len).iter() {
        if within(v.a, v.b) {
            w.push(
                RowKind::Lane,
                v.a,
                v.b,
                v.speed * layout.speed_scale,
                v.width * layout.width_scale,
            );
        }
    }

    let route = &scene.route;
    let s_ego = route.project(ego).s;
    let piece = layout.map_segment_len;
    let k0 = ((s_ego - radius) / piece).floor().max(0.0) as i64;
    let k1 = ((s_ego + radius) / piece).ceil() as i64;
    let len = route.length();
    for k in k0..k1 {
        let s0 = k as f64 * piece;
        if s0 >= len {
            break;
        }
        let s1 = (s0 + piece).min(len);
        let (a, b) = (route.pose_at(s0).0, route.pose_at(s1).0);
        if within(a, b) {
            w.push(
                RowKind::Route,
                a,
                b,
                route.speed_limit_at(s0) * layout.speed_scale,
                route.width_at(s0) * layout.width_scale,
            );
        }
    }

    for (light, state) in scene.map.traffic_lights.iter().zip(&scene.light_phases) {
        let [a, b] = light.stop_line;
        if within(a, b) {
            let red = if state.phase == LightPhase::Red { 1.0 } else { 0.0 };
            w.push(RowKind::Light, a, b, red, state.time_to_change.min(10.0) / 10.0);
        }
    }

    w.history(RowKind::Ego, &scene.ego_history, scene.ego.footprint.width);

    let mut nearby: Vec<(f64, &AgentHistory)> = scene
        .agent_histories
        .iter()
        .map(|a| (a.history.current().pos.distance(ego), a))
        .filter(|(d, _)| *d <= radius)
        .collect();
    nearby.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.agent_id.cmp(&y.1.agent_id)));
    nearby.truncate(layout.max_agents);
    nearby.sort_by_key(|(_, a)| a.agent_id);
    for (_, agent) in nearby {
        w.history(RowKind::Agent, &agent.history, agent.footprint.width);
    }

    let rows = w.features.len() / FEATURE_DIM;
    if rows > layout.max_rows {
        return Err(Error::CapacityExceeded {
            needed: rows,
            capacity: layout.max_rows,
        });
    }
    Ok(SceneTensor {
        capacity: layout.max_rows,
        features: w.features,
        mask: vec![true; rows],
    })
}

/// Lateral clearance added on both sides of the ego corridor.
pub const CORRIDOR_MARGIN: f64 = 0.3;

/// True when an agent footprint, or a red stop line, lies in the ego's route
/// corridor within `lookahead` metres ahead of the ego's front bumper.
pub fn front_blocked(scene: &Scene, lookahead: f64) -> bool {
    let route = &scene.route;
    let s_ego = route.project(scene.ego.position).s;
    let s_end = s_ego + 0.5 * scene.ego.footprint.length + lookahead;
    let half_width = 0.5 * scene.ego.footprint.width + CORRIDOR_MARGIN;

    for (light, state) in scene.map.traffic_lights.iter().zip(&scene.light_phases) {
        if state.phase == LightPhase::Red
            && route
                .crossing_s(light.stop_line[0], light.stop_line[1], s_ego, s_end)
                .is_some()
        {
            return true;
        }
    }

    let step = 1.0;
    let n = ((s_end - s_ego) / step).ceil() as usize;
    let pieces: Vec<OrientedRect> = (0..n)
        .map(|k| {
            let s0 = s_ego + k as f64 * step;
            let s1 = (s0 + step).min(s_end);
            let (p0, _) = route.pose_at(s0);
            let (p1, _) = route.pose_at(s1);
            let heading = (p1 - p0).angle();
            // slight overlap so bends leave no gaps
            OrientedRect::new(p0.lerp(p1, 0.5), heading, p0.distance(p1) + 0.05, 2.0 * half_width)
        })
        .collect();
    let reach = s_end - s_ego + 2.0 * half_width;
    scene.agent_histories.iter().any(|agent| {
        let st = agent.history.current();
        if st.pos.distance(scene.ego.position) > reach + agent.footprint.length {
            return false;
        }
        let rect = agent.footprint.rect(st.pos, st.heading);
        pieces.iter().any(|p| p.overlaps(&rect))
    })
}

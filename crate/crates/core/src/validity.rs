//! Rule-based validity of candidate trajectories against the known future.

use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    contact_point, normalize_angle, segments_intersect, signed_distance_to_polygon, OrientedRect, Vec2,
};
use crate::sampler::{CandidateSet, Trajectory};
use crate::world::{front_blocked, AgentTrack, Footprint, LightPhase, Scene, TrackState, TrafficLight, WorldMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    C,
    CS,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::C => "c",
            Variant::CS => "cs",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidityRules {
    pub variant: Variant,
    pub stuck_move_threshold: f64,
    pub stuck_stop_window: f64,
    /// Speed below which the ego counts as stopped.
    pub stuck_speed: f64,
    pub comfort_accel_max: f64,
    pub comfort_lat_accel_max: f64,
    pub offroad_margin: f64,
    pub front_block_lookahead: f64,
    pub collision_inflation: f64,
}

impl Default for ValidityRules {
    fn default() -> Self {
        Self {
            variant: Variant::C,
            stuck_move_threshold: 1.0,
            stuck_stop_window: 2.0,
            stuck_speed: 0.1,
            comfort_accel_max: 4.0,
            comfort_lat_accel_max: 3.0,
            offroad_margin: 0.3,
            front_block_lookahead: 15.0,
            collision_inflation: 0.1,
        }
    }
}

impl ValidityRules {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stuck_move_threshold,
            self.stuck_stop_window,
            self.stuck_speed,
            self.comfort_accel_max,
            self.comfort_lat_accel_max,
            self.offroad_margin,
            self.front_block_lookahead,
            self.collision_inflation,
        ];
        if positive.iter().all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("validity thresholds must be positive".into()))
        }
    }
}

/// Violation kinds, ordered by mistake priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Violation {
    Collision,
    OffRoad,
    RedLight,
    Stuck,
    Comfort,
}

impl Violation {
    pub const ALL: [Violation; 5] = [
        Violation::Collision,
        Violation::OffRoad,
        Violation::RedLight,
        Violation::Stuck,
        Violation::Comfort,
    ];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Violation::Collision => "collision",
            Violation::OffRoad => "offroad",
            Violation::RedLight => "red-light",
            Violation::Stuck => "stuck",
            Violation::Comfort => "comfort",
        }
    }
}

/// A small set of violations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violations(u8);

impl Violations {
    pub fn insert(&mut self, v: Violation) {
        self.0 |= v.bit();
    }

    pub fn contains(self, v: Violation) -> bool {
        self.0 & v.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Violation> {
        Violation::ALL.into_iter().filter(move |v| self.contains(*v))
    }

    /// Highest-priority member.
    pub fn primary(self) -> Option<Violation> {
        self.iter().next()
    }

    pub fn union(self, other: Violations) -> Violations {
        Violations(self.0 | other.0)
    }
}

impl FromIterator<Violation> for Violations {
    fn from_iter<I: IntoIterator<Item = Violation>>(iter: I) -> Self {
        let mut out = Violations::default();
        for v in iter {
            out.insert(v);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Front,
    Back,
    Side,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Front => "front",
            Side::Back => "back",
            Side::Side => "side",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionHit {
    /// Pose index within the trajectory (0 is the first planned pose).
    pub step: usize,
    /// Time offset from the trajectory start.
    pub t: f64,
    pub agent_id: u32,
    pub contact: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionDetail {
    pub t: f64,
    pub agent_id: u32,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub valid: bool,
    pub violations: Violations,
    pub collision_detail: Option<CollisionDetail>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidityReport {
    pub verdicts: Vec<ValidityVerdict>,
    pub valid_mask: Vec<bool>,
    pub valid_count: usize,
}

/// Front within 45 degrees of the heading, back beyond 135, side otherwise.
pub fn classify_collision_side(ego_pos: Vec2, ego_heading: f64, contact: Vec2) -> Side {
    let d = contact - ego_pos;
    if d.norm_sq() == 0.0 {
        return Side::Front;
    }
    let beta = normalize_angle(d.angle() - ego_heading).abs();
    if beta <= FRAC_PI_4 + 1e-12 {
        Side::Front
    } else if beta >= 3.0 * FRAC_PI_4 - 1e-12 {
        Side::Back
    } else {
        Side::Side
    }
}

/// Agent rectangles over the horizon, restricted to agents that can come
/// within reach of the ego.
pub struct AgentFuture<'a> {
    rects: Vec<(u32, Vec<OrientedRect>)>,
    _agents: std::marker::PhantomData<&'a AgentTrack>,
}

impl<'a> AgentFuture<'a> {
    /// Rectangles for ticks `tick + 1 ..= tick + steps` of agents whose
    /// footprint ever comes within `reach` of `center`.
    pub fn new(agents: &'a [AgentTrack], tick: i64, steps: usize, center: Vec2, reach: f64) -> Self {
        let rects = agents
            .iter()
            .filter_map(|a| {
                let rects: Vec<OrientedRect> = (1..=steps as i64).map(|k| a.rect_at(tick + k)).collect();
                let near = rects
                    .iter()
                    .any(|r| r.center.distance(center) <= reach + r.bounding_radius());
                near.then_some((a.agent_id, rects))
            })
            .collect();
        Self {
            rects,
            _agents: std::marker::PhantomData,
        }
    }

    pub fn all(agents: &'a [AgentTrack], tick: i64, steps: usize) -> Self {
        Self::new(agents, tick, steps, Vec2::ZERO, f64::INFINITY)
    }
}

fn ego_rect(footprint: &Footprint, pose: &crate::sampler::Pose, inflation: f64) -> OrientedRect {
    footprint.rect(pose.pos, pose.heading).inflated(inflation)
}

/// Earliest planned pose whose inflated footprint overlaps an agent.
pub fn check_collision(
    traj: &Trajectory,
    footprint: &Footprint,
    agents: &[AgentTrack],
    tick: i64,
    inflation: f64,
) -> Option<CollisionHit> {
    let future = AgentFuture::all(agents, tick, traj.poses.len());
    check_collision_against(traj, footprint, &future, inflation)
}

pub fn check_collision_against(
    traj: &Trajectory,
    footprint: &Footprint,
    future: &AgentFuture,
    inflation: f64,
) -> Option<CollisionHit> {
    for (k, pose) in traj.poses.iter().enumerate() {
        let ego = ego_rect(footprint, pose, inflation);
        for (id, rects) in &future.rects {
            let Some(other) = rects.get(k) else { continue };
            if ego.overlaps(other) {
                return Some(CollisionHit {
                    step: k,
                    t: (k + 1) as f64 * traj.dt,
                    agent_id: *id,
                    contact: contact_point(&ego, other),
                });
            }
        }
    }
    None
}

/// True when any footprint corner leaves the drivable area by more than `margin`.
pub fn check_offroad(traj: &Trajectory, footprint: &Footprint, map: &WorldMap, margin: f64) -> bool {
    let boundary = &map.drivable_boundary;
    traj.poses.iter().any(|p| {
        footprint
            .rect(p.pos, p.heading)
            .corners()
            .iter()
            .any(|&c| signed_distance_to_polygon(c, boundary) > margin)
    })
}

/// True when the ego center crosses a stop line during a tick that ends
/// while the light is red. `t0` is the absolute time of the trajectory start.
pub fn check_red_light(traj: &Trajectory, lights: &[TrafficLight], t0: f64) -> bool {
    if lights.is_empty() {
        return false;
    }
    let mut prev = traj.start.pos;
    for (k, pose) in traj.poses.iter().enumerate() {
        let t = t0 + (k + 1) as f64 * traj.dt;
        for light in lights {
            let [a, b] = light.stop_line;
            if light.phase_at(t) == LightPhase::Red && segments_intersect(prev, pose.pos, a, b) {
                return true;
            }
        }
        prev = pose.pos;
    }
    false
}

/// True when the longitudinal or lateral acceleration limit is exceeded,
/// including the step from the trajectory start.
pub fn check_comfort(traj: &Trajectory, rules: &ValidityRules) -> bool {
    let pts: Vec<&crate::sampler::Pose> = traj.with_start().collect();
    let tol = 1e-6;
    for w in pts.windows(2) {
        if ((w[1].speed - w[0].speed) / traj.dt).abs() > rules.comfort_accel_max + tol {
            return true;
        }
    }
    for w in pts.windows(3) {
        let kappa = crate::geometry::three_point_curvature(w[0].pos, w[1].pos, w[2].pos);
        if w[1].speed * w[1].speed * kappa > rules.comfort_lat_accel_max + tol {
            return true;
        }
    }
    false
}

/// Whether the ego has been stopped for the whole stuck window. `history`
/// holds consecutive ego states ending at the scene time.
pub fn ego_stopped(history: &[TrackState], dt: f64, rules: &ValidityRules) -> Result<bool> {
    let need = (rules.stuck_stop_window / dt).round() as usize + 1;
    if history.len() < need {
        return Err(Error::InsufficientHistory {
            have: history.len().saturating_sub(1) as f64 * dt,
            need: rules.stuck_stop_window,
        });
    }
    Ok(history[history.len() - need..]
        .iter()
        .all(|s| s.speed < rules.stuck_speed))
}

pub fn check_stuck(traj: &Trajectory, history: &[TrackState], scene: &Scene, rules: &ValidityRules) -> Result<bool> {
    if !ego_stopped(history, traj.dt, rules)? {
        return Ok(false);
    }
    if traj.end().pos.distance(traj.start.pos) >= rules.stuck_move_threshold {
        return Ok(false);
    }
    Ok(!front_blocked(scene, rules.front_block_lookahead))
}

/// Everything the checks need to know about the world after the scene time.
pub struct Future<'a> {
    pub agents: &'a [AgentTrack],
    /// Consecutive ego states ending at the scene time.
    pub ego_history: &'a [TrackState],
}

/// Per-scene state shared by all candidates.
pub struct Checker<'a> {
    scene: &'a Scene,
    rules: &'a ValidityRules,
    future: AgentFuture<'a>,
    /// Stuck gate: ego stopped through the window and front not blocked.
    stuck_armed: bool,
}

impl<'a> Checker<'a> {
    pub fn new(scene: &'a Scene, future: &Future<'a>, rules: &'a ValidityRules, steps: usize, dt: f64) -> Self {
        let reach = scene.ego.speed * steps as f64 * dt + 4.0 * steps as f64 * dt * steps as f64 * dt
            + scene.ego.footprint.length
            + 5.0;
        let agents = AgentFuture::new(future.agents, scene.tick, steps, scene.ego.position, reach);
        let stuck_armed = rules.variant == Variant::CS
            && ego_stopped(future.ego_history, dt, rules).unwrap_or(false)
            && !front_blocked(scene, rules.front_block_lookahead);
        Self {
            scene,
            rules,
            future: agents,
            stuck_armed,
        }
    }

    pub fn verdict(&self, traj: &Trajectory) -> ValidityVerdict {
        let scene = self.scene;
        let rules = self.rules;
        let fp = &scene.ego.footprint;
        let mut violations = Violations::default();
        let mut collision_detail = None;
        if let Some(hit) = check_collision_against(traj, fp, &self.future, rules.collision_inflation) {
            violations.insert(Violation::Collision);
            let pose = &traj.poses[hit.step];
            collision_detail = Some(CollisionDetail {
                t: scene.t + hit.t,
                agent_id: hit.agent_id,
                side: classify_collision_side(pose.pos, pose.heading, hit.contact),
            });
        }
        if check_offroad(traj, fp, &scene.map, rules.offroad_margin) {
            violations.insert(Violation::OffRoad);
        }
        if check_red_light(traj, &scene.map.traffic_lights, scene.t) {
            violations.insert(Violation::RedLight);
        }
        if check_comfort(traj, rules) {
            violations.insert(Violation::Comfort);
        }
        if self.stuck_armed && traj.end().pos.distance(traj.start.pos) < rules.stuck_move_threshold {
            violations.insert(Violation::Stuck);
        }
        ValidityVerdict {
            valid: violations.is_empty(),
            violations,
            collision_detail,
        }
    }
}

pub fn evaluate_candidate_set(
    cands: &CandidateSet,
    scene: &Scene,
    future: &Future,
    rules: &ValidityRules,
) -> ValidityReport {
    let steps = cands.candidates.first().map_or(0, |c| c.poses.len());
    let dt = cands.candidates.first().map_or(0.1, |c| c.dt);
    let checker = Checker::new(scene, future, rules, steps, dt);
    let verdicts: Vec<ValidityVerdict> = cands.candidates.iter().map(|c| checker.verdict(c)).collect();
    report_from(verdicts)
}

pub fn report_from(verdicts: Vec<ValidityVerdict>) -> ValidityReport {
    let valid_mask: Vec<bool> = verdicts.iter().map(|v| v.valid).collect();
    let valid_count = valid_mask.iter().filter(|&&v| v).count();
    ValidityReport {
        verdicts,
        valid_mask,
        valid_count,
    }
}

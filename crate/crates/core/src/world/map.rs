//! Static road geometry and the synthetic map generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polygon_area, polygon_is_simple, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(pub u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: LaneId,
    pub centerline: Vec<Vec2>,
    pub width: f64,
    pub speed_limit: f64,
}

impl LanePolyline {
    pub fn arc_length(&self) -> f64 {
        self.centerline.windows(2).map(|w| w[0].distance(w[1])).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightPhase {
    Red,
    Green,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: LightPhase,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub id: u32,
    pub stop_line: [Vec2; 2],
    pub schedule: Vec<PhaseSpan>,
}

impl TrafficLight {
    fn span_index(&self, t: f64) -> usize {
        // First span whose end lies beyond t; times past the schedule hold the last phase.
        self.schedule
            .partition_point(|s| s.end <= t)
            .min(self.schedule.len() - 1)
    }

    pub fn phase_at(&self, t: f64) -> LightPhase {
        self.schedule[self.span_index(t)].phase
    }

    /// Seconds until the phase changes, `f64::INFINITY` past the schedule end.
    pub fn time_to_change(&self, t: f64) -> f64 {
        let i = self.span_index(t);
        if i + 1 == self.schedule.len() {
            f64::INFINITY
        } else {
            self.schedule[i].end - t
        }
    }

    fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidMap(format!("light {} has no schedule", self.id)));
        }
        for w in self.schedule.windows(2) {
            if (w[0].end - w[1].start).abs() > 1e-9 || w[0].phase == w[1].phase {
                return Err(Error::InvalidMap(format!(
                    "light {} schedule does not tile or alternate",
                    self.id
                )));
            }
        }
        if self.schedule.iter().any(|s| s.end <= s.start) {
            return Err(Error::InvalidMap(format!("light {} has an empty span", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldMap {
    pub lanes: Vec<LanePolyline>,
    pub drivable_boundary: Vec<Vec2>,
    pub traffic_lights: Vec<TrafficLight>,
    pub routes: BTreeMap<String, Vec<LaneId>>,
    #[serde(skip)]
    pub(crate) vectors: OnceLock<(f64, Vec<super::scene::MapVector>)>,
}

impl WorldMap {
    pub fn new(
        lanes: Vec<LanePolyline>,
        drivable_boundary: Vec<Vec2>,
        traffic_lights: Vec<TrafficLight>,
        routes: BTreeMap<String, Vec<LaneId>>,
    ) -> Result<Self> {
        let map = Self {
            lanes,
            drivable_boundary,
            traffic_lights,
            routes,
            vectors: OnceLock::new(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn lane(&self, id: LaneId) -> Option<&LanePolyline> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return Err(Error::InvalidMap(format!("lane {:?} has < 2 points", lane.id)));
            }
            if lane.centerline.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidMap(format!("lane {:?} repeats a point", lane.id)));
            }
            if !(lane.width > 1.0 && lane.width <= 10.0) {
                return Err(Error::InvalidMap(format!("lane {:?} width {}", lane.id, lane.width)));
            }
            if !(lane.arc_length() > 0.0) || !(lane.speed_limit > 0.0) {
                return Err(Error::InvalidMap(format!("lane {:?} is degenerate", lane.id)));
            }
        }
        if !polygon_is_simple(&self.drivable_boundary) {
            return Err(Error::InvalidMap("drivable boundary is not simple".into()));
        }
        for light in &self.traffic_lights {
            light.validate()?;
        }
        for (name, chain) in &self.routes {
            if chain.is_empty() {
                return Err(Error::InvalidMap(format!("route {name:?} is empty")));
            }
            let mut prev_end: Option<Vec2> = None;
            for id in chain {
                let lane = self
                    .lane(*id)
                    .ok_or_else(|| Error::InvalidMap(format!("route {name:?} references {id:?}")))?;
                if let Some(end) = prev_end {
                    if end.distance(lane.centerline[0]) > 1e-6 {
                        return Err(Error::InvalidMap(format!("route {name:?} is not connected")));
                    }
                }
                prev_end = lane.centerline.last().copied();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    #[serde(rename = "straight-road")]
    StraightRoad,
    #[serde(rename = "t-intersection")]
    TIntersection,
    #[serde(rename = "4-way")]
    FourWay,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::StraightRoad => "straight-road",
            Template::TIntersection => "t-intersection",
            Template::FourWay => "4-way",
        }
    }
}

/// Closed interval sampled uniformly by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub fn fixed(v: f64) -> Self {
        Span(v, v)
    }

    pub fn sample(self, rng: &mut impl Rng) -> f64 {
        if self.1 > self.0 {
            rng.gen_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn check(self, what: &str, positive: bool) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::InvalidSpec(format!("{what} range [{}, {}]", self.0, self.1)));
        }
        if positive && self.0 <= 0.0 {
            return Err(Error::InvalidSpec(format!("{what} must be positive, got {}", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldGenSpec {
    pub template: Template,
    /// Straight road: same-direction lanes. Intersections: lanes per direction.
    pub lanes: u32,
    /// Road length (straight) or arm length beyond the junction box.
    pub length: Span,
    pub lane_width: Span,
    pub speed_limit: Span,
    /// Extra junction half-size beyond the road edge; sets right-turn radius.
    pub corner_radius: Span,
    /// Design lateral acceleration used to derive turn speed limits.
    pub turn_lat_accel: f64,
    pub signalized: bool,
    pub signal_cycle: Span,
    pub signal_clearance: f64,
    /// Schedules are generated over [0, schedule_horizon].
    pub schedule_horizon: f64,
    pub vertex_spacing: f64,
}

impl Default for WorldGenSpec {
    fn default() -> Self {
        Self {
            template: Template::FourWay,
            lanes: 1,
            length: Span(250.0, 300.0),
            lane_width: Span(3.5, 3.8),
            speed_limit: Span(10.0, 13.0),
            corner_radius: Span(8.0, 10.0),
            turn_lat_accel: 2.0,
            signalized: true,
            signal_cycle: Span(24.0, 34.0),
            signal_clearance: 2.0,
            schedule_horizon: 120.0,
            vertex_spacing: 0.25,
        }
    }
}

impl WorldGenSpec {
    pub fn straight(lanes: u32, length: f64) -> Self {
        Self {
            template: Template::StraightRoad,
            lanes,
            length: Span::fixed(length),
            signalized: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return Err(Error::InvalidSpec("lane count must be >= 1".into()));
        }
        self.length.check("length", true)?;
        self.lane_width.check("lane_width", true)?;
        if self.lane_width.0 <= 1.0 || self.lane_width.1 > 10.0 {
            return Err(Error::InvalidSpec("lane_width must lie in (1, 10]".into()));
        }
        self.speed_limit.check("speed_limit", true)?;
        if self.template != Template::StraightRoad {
            self.corner_radius.check("corner_radius", true)?;
        }
        if self.signalized {
            self.signal_cycle.check("signal_cycle", true)?;
            if self.signal_cycle.0 <= 2.0 * self.signal_clearance + 2.0 {
                return Err(Error::InvalidSpec("signal cycle too short for clearance".into()));
            }
        }
        if !(self.turn_lat_accel > 0.0 && self.vertex_spacing > 0.0 && self.schedule_horizon > 0.0)
        {
            return Err(Error::InvalidSpec("non-positive generator constant".into()));
        }
        Ok(())
    }
}

/// Builds a map from `spec`; the result depends only on `(spec, seed)`.
pub fn build_synthetic_world(spec: &WorldGenSpec, seed: u64) -> Result<WorldMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.template {
        Template::StraightRoad => straight_road(spec, &mut rng),
        Template::TIntersection => junction(spec, &mut rng, false),
        Template::FourWay => junction(spec, &mut rng, true),
    }
}

fn straight_road(spec: &WorldGenSpec, rng: &mut ChaCha8Rng) -> Result<WorldMap> {
    let length = spec.length.sample(rng);
    let w = spec.lane_width.sample(rng);
    let limit = spec.speed_limit.sample(rng);
    let n = spec.lanes as usize;
    let half = 0.5 * n as f64 * w;
    let mut lanes = Vec::with_capacity(n);
    let mut routes = BTreeMap::new();
    for i in 0..n {
        let y = half - (i as f64 + 0.5) * w;
        lanes.push(LanePolyline {
            id: LaneId(i as u32),
            centerline: vec![Vec2::new(0.0, y), Vec2::new(length, y)],
            width: w,
            speed_limit: limit,
        });
        routes.insert(format!("lane-{i}"), vec![LaneId(i as u32)]);
    }
    let boundary = vec![
        Vec2::new(0.0, -half),
        Vec2::new(length, -half),
        Vec2::new(length, half),
        Vec2::new(0.0, half),
    ];
    let mut lights = Vec::new();
    if spec.signalized {
        let x = length * rng.gen_range(0.35..0.65);
        let cycle = spec.signal_cycle.sample(rng);
        let green = rng.gen_range(0.45..0.65) * cycle;
        let offset = rng.gen_range(0.0..cycle);
        let schedule = cyclic_schedule(&[(LightPhase::Green, green), (LightPhase::Red, cycle - green)], offset, spec.schedule_horizon);
        lights.push(TrafficLight {
            id: 0,
            stop_line: [Vec2::new(x, -half), Vec2::new(x, half)],
            schedule,
        });
    }
    WorldMap::new(lanes, boundary, lights, routes)
}

/// Phase list repeated from `-offset`, clipped to [0, horizon] and merged.
fn cyclic_schedule(pattern: &[(LightPhase, f64)], offset: f64, horizon: f64) -> Vec<PhaseSpan> {
    let cycle: f64 = pattern.iter().map(|p| p.1).sum();
    let mut spans: Vec<PhaseSpan> = Vec::new();
    let mut t = -offset;
    while t < horizon {
        for &(phase, dur) in pattern {
            let (start, end) = (t.max(0.0), (t + dur).min(horizon));
            t += dur;
            if end <= start {
                continue;
            }
            match spans.last_mut() {
                Some(last) if last.phase == phase => last.end = end,
                _ => spans.push(PhaseSpan { phase, start, end }),
            }
        }
        if cycle <= 0.0 {
            break;
        }
    }
    spans
}

#[derive(Clone, Copy)]
struct Arm {
    name: &'static str,
    outward: Vec2,
}

fn right_of(d: Vec2) -> Vec2 {
    Vec2::new(d.y, -d.x)
}

fn junction(spec: &WorldGenSpec, rng: &mut ChaCha8Rng, four_way: bool) -> Result<WorldMap> {
    let arm_len = spec.length.sample(rng);
    let w = spec.lane_width.sample(rng);
    let limit = spec.speed_limit.sample(rng);
    let corner = spec.corner_radius.sample(rng);
    let n = spec.lanes as usize;
    let a = n as f64 * w;
    let h = a + corner;
    let e = h + arm_len;

    let mut arms = vec![
        Arm { name: "west", outward: Vec2::new(-1.0, 0.0) },
        Arm { name: "east", outward: Vec2::new(1.0, 0.0) },
        Arm { name: "south", outward: Vec2::new(0.0, -1.0) },
    ];
    if four_way {
        arms.push(Arm { name: "north", outward: Vec2::new(0.0, 1.0) });
    }

    let mut lanes: Vec<LanePolyline> = Vec::new();
    let mut next_id = 0u32;
    let mut push_lane = |lanes: &mut Vec<LanePolyline>, pts: Vec<Vec2>, speed: f64| {
        let id = LaneId(next_id);
        next_id += 1;
        lanes.push(LanePolyline {
            id,
            centerline: pts,
            width: w,
            speed_limit: speed,
        });
        id
    };

    // approach[arm][lane] and exit[arm][lane]
    let mut approach: Vec<Vec<LaneId>> = Vec::new();
    let mut exit: Vec<Vec<LaneId>> = Vec::new();
    for arm in &arms {
        let d = -arm.outward;
        let r = right_of(d);
        let ids = (0..n)
            .map(|i| {
                let off = r * ((i as f64 + 0.5) * w);
                push_lane(&mut lanes, vec![arm.outward * e + off, arm.outward * h + off], limit)
            })
            .collect();
        approach.push(ids);
    }
    for arm in &arms {
        let r = right_of(arm.outward);
        let ids = (0..n)
            .map(|i| {
                let off = r * ((i as f64 + 0.5) * w);
                push_lane(&mut lanes, vec![arm.outward * h + off, arm.outward * e + off], limit)
            })
            .collect();
        exit.push(ids);
    }

    let mut routes = BTreeMap::new();
    for (ai, arm_a) in arms.iter().enumerate() {
        let d = -arm_a.outward;
        let r = right_of(d);
        for (bi, arm_b) in arms.iter().enumerate() {
            if ai == bi {
                continue;
            }
            let u_b = arm_b.outward;
            let (lane_a, lane_b, points, speed) = if (u_b - d).norm() < 1e-9 {
                // straight through; route uses the rightmost lane
                let i = n - 1;
                let p = lanes[approach[ai][i].0 as usize].centerline[1];
                let q = lanes[exit[bi][i].0 as usize].centerline[0];
                (i, i, vec![p, q], limit)
            } else {
                let right_turn = (u_b - r).norm() < 1e-9;
                let i = if right_turn { n - 1 } else { 0 };
                let p = lanes[approach[ai][i].0 as usize].centerline[1];
                let q = lanes[exit[bi][i].0 as usize].centerline[0];
                let pts = turn_arc(p, d, q, u_b, right_turn, spec.vertex_spacing)?;
                let radius = pts[0].distance(turn_center(p, d, q, u_b));
                let speed = limit.min((spec.turn_lat_accel * radius).sqrt());
                (i, i, pts, speed)
            };
            let conn = push_lane(&mut lanes, points, speed);
            routes.insert(
                format!("{}→{}", arm_a.name, arm_b.name),
                vec![approach[ai][lane_a], conn, exit[bi][lane_b]],
            );
        }
    }

    let boundary: Vec<Vec2> = if four_way {
        [
            (e, -a), (e, a), (h, a), (h, h), (a, h), (a, e), (-a, e), (-a, h), (-h, h), (-h, a),
            (-e, a), (-e, -a), (-h, -a), (-h, -h), (-a, -h), (-a, -e), (a, -e), (a, -h), (h, -h),
            (h, -a),
        ]
        .iter()
        .map(|&(x, y)| Vec2::new(x, y))
        .collect()
    } else {
        [
            (e, -a), (e, a), (-e, a), (-e, -a), (-h, -a), (-h, -h), (-a, -h), (-a, -e), (a, -e),
            (a, -h), (h, -h), (h, -a),
        ]
        .iter()
        .map(|&(x, y)| Vec2::new(x, y))
        .collect()
    };
    debug_assert!(polygon_area(&boundary) > 0.0);

    let mut lights = Vec::new();
    if spec.signalized {
        let cycle = spec.signal_cycle.sample(rng);
        let clear = spec.signal_clearance;
        let usable = cycle - 2.0 * clear;
        let g1 = rng.gen_range(0.45..0.6) * usable;
        let g2 = usable - g1;
        let offset = rng.gen_range(0.0..cycle);
        // group 1: east-west approaches; group 2: the rest
        let group1 = [
            (LightPhase::Green, g1),
            (LightPhase::Red, clear + g2 + clear),
        ];
        let group2 = [
            (LightPhase::Red, g1 + clear),
            (LightPhase::Green, g2),
            (LightPhase::Red, clear),
        ];
        for (ai, arm) in arms.iter().enumerate() {
            let d = -arm.outward;
            let r = right_of(d);
            let base = arm.outward * h;
            let pattern: &[(LightPhase, f64)] = if arm.outward.y == 0.0 { &group1 } else { &group2 };
            lights.push(TrafficLight {
                id: ai as u32,
                stop_line: [base, base + r * a],
                schedule: cyclic_schedule(pattern, offset, spec.schedule_horizon),
            });
        }
    }

    WorldMap::new(lanes, boundary, lights, routes)
}

fn turn_center(p: Vec2, d: Vec2, q: Vec2, u_b: Vec2) -> Vec2 {
    // centre lies on the normal through p and on the normal through q
    let n1 = right_of(d);
    let n2 = right_of(u_b);
    let denom = n1.cross(n2);
    let t = (q - p).cross(n2) / denom;
    p + n1 * t
}

fn turn_arc(p: Vec2, d: Vec2, q: Vec2, u_b: Vec2, clockwise: bool, spacing: f64) -> Result<Vec<Vec2>> {
    let c = turn_center(p, d, q, u_b);
    let r = c.distance(p);
    if (c.distance(q) - r).abs() > 1e-6 || r <= 0.0 {
        return Err(Error::InvalidSpec("turn arc is not circular".into()));
    }
    let a0 = (p - c).angle();
    let mut sweep = (q - c).angle() - a0;
    if clockwise {
        while sweep >= 0.0 {
            sweep -= 2.0 * PI;
        }
    } else {
        while sweep <= 0.0 {
            sweep += 2.0 * PI;
        }
    }
    let steps = ((sweep.abs() * r) / spacing).ceil().max(2.0) as usize;
    let mut pts: Vec<Vec2> = (0..=steps)
        .map(|k| {
            let ang = a0 + sweep * k as f64 / steps as f64;
            c + Vec2::new(ang.cos(), ang.sin()) * r
        })
        .collect();
    // pin the endpoints so that lanes chain exactly
    pts[0] = p;
    *pts.last_mut().unwrap() = q;
    Ok(pts)
}

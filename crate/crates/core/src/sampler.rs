//! Candidate trajectory generation along the ego route.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Vec2};
use crate::world::{FeatureLayout, RoutePath, Scene, TrackState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vec2,
    pub heading: f64,
    pub speed: f64,
}

impl Pose {
    pub fn from_state(s: &TrackState) -> Self {
        Self {
            pos: s.pos,
            heading: s.heading,
            speed: s.speed,
        }
    }
}

/// `poses[k]` is the planned pose at `(k + 1) * dt` after `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Pose,
    pub poses: Vec<Pose>,
    pub dt: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> f64 {
        self.poses.len() as f64 * self.dt
    }

    /// `start` followed by every planned pose.
    pub fn with_start(&self) -> impl Iterator<Item = &Pose> {
        std::iter::once(&self.start).chain(self.poses.iter())
    }

    pub fn end(&self) -> &Pose {
        self.poses.last().unwrap_or(&self.start)
    }

    /// Largest mismatch between step length and `speed * dt`.
    pub fn kinematic_error(&self) -> f64 {
        let mut prev = self.start.pos;
        let mut worst: f64 = 0.0;
        for p in &self.poses {
            worst = worst.max((p.pos.distance(prev) - p.speed * self.dt).abs());
            prev = p.pos;
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.with_start()
            .all(|p| p.pos.is_finite() && p.heading.is_finite() && p.speed.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub horizon: f64,
    pub dt: f64,
    pub accel_levels: Vec<f64>,
    pub lateral_offsets: Vec<f64>,
    pub include_stay: bool,
    /// Speeds are clamped to this multiple of the route speed limit.
    pub speed_cap: f64,
    /// Minimum distance over which a lateral offset is reached.
    pub blend_min: f64,
    /// Blend distance per m/s of initial speed.
    pub blend_per_speed: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            horizon: 3.0,
            dt: 0.1,
            accel_levels: vec![-4.0, -2.0, -1.0, 0.0, 1.0, 2.0],
            lateral_offsets: vec![-1.0, 0.0, 1.0],
            include_stay: true,
            speed_cap: 1.2,
            blend_min: 10.0,
            blend_per_speed: 3.0,
        }
    }
}

impl SamplerConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn num_candidates(&self) -> usize {
        self.accel_levels.len() * self.lateral_offsets.len() + usize::from(self.include_stay)
    }

    /// Index of the (accel, offset) candidate.
    pub fn index_of(&self, accel: usize, offset: usize) -> usize {
        accel * self.lateral_offsets.len() + offset
    }

    pub fn stay_index(&self) -> Option<usize> {
        self.include_stay
            .then(|| self.accel_levels.len() * self.lateral_offsets.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.horizon / self.dt;
        if !(self.horizon > 0.0 && self.dt > 0.0) || (k - k.round()).abs() > 1e-9 {
            return Err(Error::Config("sampler horizon must be a positive multiple of dt".into()));
        }
        if self.num_candidates() == 0 {
            return Err(Error::Config("sampler produces no candidates".into()));
        }
        if !(self.speed_cap > 0.0 && self.blend_min > 0.0 && self.blend_per_speed >= 0.0) {
            return Err(Error::Config("sampler limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Trajectory>,
    pub accel_levels: Vec<f64>,
    pub lateral_offsets: Vec<f64>,
    pub route: String,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

const PATH_STEP: f64 = 0.1;

/// Polyline of the route shifted laterally, with cumulative length.
struct OffsetPath {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl OffsetPath {
    fn build(route: &RoutePath, s0: f64, l0: f64, target: f64, blend: f64, reach: f64) -> Self {
        let n = (reach / PATH_STEP).ceil() as usize + 2;
        let mut points = Vec::with_capacity(n);
        let mut cum = Vec::with_capacity(n);
        for j in 0..n {
            let ds = j as f64 * PATH_STEP;
            let lateral = l0 + (target - l0) * smoothstep(ds / blend);
            let p = route.offset_point(s0 + ds, lateral);
            let c = match points.last() {
                Some(&q) => cum[j - 1] + p.distance(q),
                None => 0.0,
            };
            points.push(p);
            cum.push(c);
        }
        Self { points, cum }
    }

    /// Point and direction at distance `d` along the path.
    fn at(&self, d: f64) -> (Vec2, f64) {
        let n = self.points.len();
        let i = self.cum.partition_point(|&c| c <= d).clamp(1, n - 1) - 1;
        let seg = self.cum[i + 1] - self.cum[i];
        let dir = (self.points[i + 1] - self.points[i]).angle();
        let f = if seg > 0.0 { (d - self.cum[i]) / seg } else { 0.0 };
        let p = if f > 1.0 {
            self.points[i + 1] + crate::geometry::Vec2::from_heading(dir) * (d - self.cum[i + 1])
        } else {
            self.points[i].lerp(self.points[i + 1], f)
        };
        (p, dir)
    }
}

/// Constant-acceleration speed and distance profile with trapezoidal
/// integration, speeds clamped to `[0, v_max]`.
pub fn speed_profile(v0: f64, accel: f64, v_max: f64, dt: f64, steps: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(steps);
    let (mut v, mut s) = (v0, 0.0);
    for _ in 0..steps {
        let v1 = (v + accel * dt).clamp(0.0, v_max.max(v0));
        s += 0.5 * (v + v1) * dt;
        v = v1;
        out.push((v, s));
    }
    out
}

pub fn generate_candidates(scene: &Scene, cfg: &SamplerConfig) -> Result<CandidateSet> {
    let route = &scene.route;
    let ego = &scene.ego;
    let proj = route.project(ego.position);
    if route.length() - proj.s <= 0.0 {
        return Err(Error::DegenerateRoute(route.name.clone()));
    }
    let steps = cfg.steps();
    let dt = cfg.dt;
    let start = Pose {
        pos: ego.position,
        heading: ego.heading,
        speed: ego.speed,
    };
    let v_max = cfg.speed_cap * route.speed_limit_at(proj.s);
    let profiles: Vec<Vec<(f64, f64)>> = cfg
        .accel_levels
        .iter()
        .map(|&a| speed_profile(ego.speed, a, v_max, dt, steps))
        .collect();
    let reach = profiles
        .iter()
        .filter_map(|p| p.last().map(|x| x.1))
        .fold(0.0, f64::max);
    let blend = cfg.blend_min.max(cfg.blend_per_speed * ego.speed);

    let mut candidates = Vec::with_capacity(cfg.num_candidates());
    let paths: Vec<OffsetPath> = cfg
        .lateral_offsets
        .iter()
        .map(|&d| OffsetPath::build(route, proj.s, proj.lateral, d, blend, reach + 1.0))
        .collect();
    for profile in &profiles {
        for path in &paths {
            // start from the ego position; the path begins at its projection
            let shift = ego.position - path.points[0];
            let mut heading = ego.heading;
            let poses = profile
                .iter()
                .map(|&(v, s)| {
                    let (p, dir) = path.at(s);
                    if s > 0.0 {
                        heading = dir;
                    }
                    let fade = 1.0 - smoothstep(s / blend);
                    Pose {
                        pos: p + shift * fade,
                        heading,
                        speed: v,
                    }
                })
                .collect();
            candidates.push(Trajectory { start, poses, dt });
        }
    }
    if cfg.include_stay {
        let still = Pose { speed: 0.0, ..start };
        candidates.push(Trajectory {
            start,
            poses: vec![still; steps],
            dt,
        });
    }
    Ok(CandidateSet {
        candidates,
        accel_levels: cfg.accel_levels.clone(),
        lateral_offsets: cfg.lateral_offsets.clone(),
        route: route.name.clone(),
    })
}

/// Sum over poses of the squared planar distance.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.poses.len() != b.poses.len() {
        return Err(Error::LengthMismatch(a.poses.len(), b.poses.len()));
    }
    Ok(a.poses
        .iter()
        .zip(&b.poses)
        .map(|(p, q)| (p.pos - q.pos).norm_sq())
        .sum())
}

/// Index of the candidate closest to `expert`; ties go to the lowest index.
pub fn nearest_to_expert(cands: &CandidateSet, expert: &Trajectory) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in cands.candidates.iter().enumerate() {
        let d = trajectory_distance(c, expert)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Pose indices kept when downsampling `k` poses to `d` waypoints.
pub fn waypoint_indices(k: usize, d: usize) -> Vec<usize> {
    let d = d.clamp(1, k.max(1));
    (0..d).map(|j| ((j + 1) * k + d / 2) / d - 1).collect()
}

/// Ego-frame `(x, y, speed)` at `layout.waypoints` evenly spaced poses.
pub fn vectorize_candidate(t: &Trajectory, layout: &FeatureLayout) -> Vec<f64> {
    let frame = Frame::new(t.start.pos, t.start.heading);
    let mut out = Vec::with_capacity(3 * layout.waypoints);
    for i in waypoint_indices(t.poses.len(), layout.waypoints) {
        let p = &t.poses[i];
        let local = frame.to_local(p.pos) * layout.pos_scale;
        out.extend_from_slice(&[local.x, local.y, p.speed * layout.speed_scale]);
    }
    out
}

/// Expert trajectory from recorded ego states: `states[tick]` is the start,
/// the next `steps` states are the poses.
pub fn expert_trajectory(states: &[TrackState], tick: usize, steps: usize, dt: f64) -> Option<Trajectory> {
    if tick + steps >= states.len() {
        return None;
    }
    Some(Trajectory {
        start: Pose::from_state(&states[tick]),
        poses: states[tick + 1..=tick + steps].iter().map(Pose::from_state).collect(),
        dt,
    })
}

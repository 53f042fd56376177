#![allow(dead_code)]

use std::sync::Arc;

use vlplan::geometry::Vec2;
use vlplan::logs::RecordedLog;
use vlplan::sampler::{Pose, Trajectory};
use vlplan::validity::{check_stuck, Checker, Future, ValidityRules, ValidityVerdict};
use vlplan::world::{
    build_synthetic_world, AgentTrack, Footprint, RoutePath, Scene, Template, TrackState, WorldGenSpec, WorldMap,
};

pub const DT: f64 = 0.1;

pub fn straight_map() -> Arc<WorldMap> {
    Arc::new(build_synthetic_world(&WorldGenSpec::straight(1, 800.0), 5).unwrap())
}

pub fn t_junction() -> Arc<WorldMap> {
    let spec = WorldGenSpec {
        template: Template::TIntersection,
        signalized: false,
        ..WorldGenSpec::default()
    };
    Arc::new(build_synthetic_world(&spec, 9).unwrap())
}

pub fn route(map: &WorldMap, name: &str) -> Arc<RoutePath> {
    Arc::new(RoutePath::from_map(map, name).unwrap())
}

pub fn first_route(map: &WorldMap) -> Arc<RoutePath> {
    route(map, map.routes.keys().next().unwrap())
}

/// States along `route` for arc lengths `s(t)` and speeds `v(t)`.
pub fn track(route: &RoutePath, ticks: usize, s: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> Vec<TrackState> {
    (0..=ticks)
        .map(|k| {
            let t = k as f64 * DT;
            let (pos, heading) = route.pose_at(s(t));
            TrackState { t, pos, heading, speed: v(t) }
        })
        .collect()
}

pub fn log_with(
    id: &str,
    map: Arc<WorldMap>,
    route: &RoutePath,
    ego: Vec<TrackState>,
    agents: Vec<AgentTrack>,
    duration: f64,
) -> RecordedLog {
    let ego = AgentTrack {
        agent_id: 0,
        footprint: Footprint::CAR,
        states: ego,
    };
    RecordedLog::new(id.into(), "straight-road".into(), 0, map, route.name.clone(), ego, agents, DT, duration).unwrap()
}

/// Ego cruising at `speed` from arc length 30 on a straight road.
pub fn cruise_log(id: &str, duration: f64, speed: f64) -> RecordedLog {
    let map = straight_map();
    let r = first_route(&map);
    let ticks = ((duration + 4.0) / DT).round() as usize;
    let ego = track(&r, ticks, |t| 30.0 + speed * t, |_| speed);
    log_with(id, map, &r, ego, vec![], duration)
}

/// Ego parked for `wait` seconds, then accelerating at 1 m/s^2 up to 8 m/s.
pub fn wait_then_go_log(id: &str, duration: f64, wait: f64) -> RecordedLog {
    let map = straight_map();
    let r = first_route(&map);
    let ticks = ((duration + 4.0) / DT).round() as usize;
    let v = move |t: f64| (t - wait).clamp(0.0, 8.0);
    let s = move |t: f64| {
        let u = (t - wait).max(0.0);
        if u <= 8.0 {
            30.0 + 0.5 * u * u
        } else {
            30.0 + 32.0 + 8.0 * (u - 8.0)
        }
    };
    let ego = track(&r, ticks, s, v);
    log_with(id, map, &r, ego, vec![], duration)
}

pub fn agent(id: u32, states: Vec<TrackState>) -> AgentTrack {
    AgentTrack {
        agent_id: id,
        footprint: Footprint::CAR,
        states,
    }
}

/// Trajectory that creeps `dist` metres over the horizon from `pose`.
pub fn creep(pose: &TrackState, dist: f64, steps: usize) -> Trajectory {
    let dir = Vec2::from_heading(pose.heading);
    let poses = (1..=steps)
        .map(|k| Pose {
            pos: pose.pos + dir * (dist * k as f64 / steps as f64),
            heading: pose.heading,
            speed: dist / (steps as f64 * DT),
        })
        .collect();
    Trajectory {
        start: Pose { pos: pose.pos, heading: pose.heading, speed: dist / (steps as f64 * DT) },
        poses,
        dt: DT,
    }
}

pub struct Stopped {
    pub map: Arc<WorldMap>,
    pub route: Arc<RoutePath>,
    pub ego: Vec<TrackState>,
    pub agents: Vec<AgentTrack>,
}

/// Ego parked at arc length 50 for `secs`, optionally with a stopped car
/// whose rear bumper is `gap` metres ahead.
pub fn stopped(secs: f64, gap: Option<f64>) -> Stopped {
    let map = straight_map();
    let route = first_route(&map);
    let ticks = (secs / DT).round() as usize;
    let ego = track(&route, ticks, |_| 50.0, |_| 0.0);
    let agents = gap
        .map(|g| {
            let s = 50.0 + Footprint::CAR.length + g;
            vec![agent(1, track(&route, ticks + 40, move |_| s, |_| 0.0))]
        })
        .unwrap_or_default();
    Stopped { map, route, ego, agents }
}

impl Stopped {
    pub fn scene(&self) -> Scene {
        let tick = self.ego.len() as i64 - 1;
        Scene::assemble(self.map.clone(), self.route.clone(), &self.ego, Footprint::CAR, &self.agents, tick, DT, 10)
    }

    pub fn stuck(&self, dist: f64, rules: &ValidityRules) -> bool {
        let traj = creep(self.ego.last().unwrap(), dist, 30);
        check_stuck(&traj, &self.ego, &self.scene(), rules).unwrap()
    }

    pub fn verdict(&self, dist: f64, rules: &ValidityRules) -> ValidityVerdict {
        let scene = self.scene();
        let future = Future {
            agents: &self.agents,
            ego_history: &self.ego,
        };
        let traj = creep(self.ego.last().unwrap(), dist, 30);
        Checker::new(&scene, &future, rules, 30, DT).verdict(&traj)
    }
}

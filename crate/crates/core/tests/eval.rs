use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use vlplan::eval::*;
use vlplan::geometry::Vec2;
use vlplan::sampler::SamplerConfig;
use vlplan::sim::{Outcome, RolloutResult, ScenarioSpec};
use vlplan::validity::Side;
use vlplan::world::{build_synthetic_world, AgentTrack, Footprint, RoutePath, Scene, TrackState, WorldGenSpec};
use vlplan::Error;

fn idm_oracle(v: f64, v0: f64, gap: Option<f64>, dv: f64, p: &IdmParams) -> f64 {
    let interaction = gap.map_or(0.0, |s| {
        ((p.s0 + v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())) / s).powi(2)
    });
    p.a_max * (1.0 - (v / v0).powf(p.delta) - interaction)
}

#[test]
fn idm_boundaries() {
    let p = IdmParams::default();
    assert_eq!(idm_accel(0.0, 12.0, None, 0.0, &p), p.a_max);
    assert_eq!(idm_accel(12.0, 12.0, None, 0.0, &p), 0.0);
    let p = IdmParams {
        delta: 4.0,
        ..IdmParams::default()
    };
    // 2 * (1 - (2/3)^4 - (17/20)^2)
    let expected = 2.0 * (1.0 - 16.0 / 81.0 - 0.7225);
    assert!((idm_accel(10.0, 15.0, Some(20.0), 0.0, &p) - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn idm_matches_formula(
        v in 0.0..20.0f64, v0 in 1.0..20.0f64, gap in 0.5..100.0f64, dv in -10.0..10.0f64,
        a_max in 0.5..3.0f64, b in 0.5..4.0f64, s0 in 0.5..4.0f64, t in 0.5..2.5f64, delta in 1.0..6.0f64,
        leader in any::<bool>(),
    ) {
        let p = IdmParams { a_max, b, s0, time_headway: t, delta };
        let gap = leader.then_some(gap);
        let got = idm_accel(v, v0, gap, dv, &p);
        let want = idm_oracle(v, v0, gap, dv, &p);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

struct Road {
    map: Arc<vlplan::world::WorldMap>,
    route: Arc<RoutePath>,
}

fn road() -> Road {
    let map = Arc::new(build_synthetic_world(&WorldGenSpec::straight(1, 600.0), 5).unwrap());
    let name = map.routes.keys().next().unwrap().clone();
    let route = Arc::new(RoutePath::from_map(&map, &name).unwrap());
    Road { map, route }
}

fn states_at(route: &RoutePath, s: f64, speed: f64, n: usize) -> Vec<TrackState> {
    (0..n)
        .map(|k| {
            let back = speed * 0.1 * (n - 1 - k) as f64;
            let (pos, heading) = route.pose_at(s - back);
            TrackState {
                t: k as f64 * 0.1,
                pos,
                heading,
                speed,
            }
        })
        .collect()
}

fn scene(r: &Road, s: f64, speed: f64, agents: &[AgentTrack]) -> Scene {
    let ego = states_at(&r.route, s, speed, 11);
    Scene::assemble(r.map.clone(), r.route.clone(), &ego, Footprint::CAR, agents, 10, 0.1, 10)
}

fn parked(route: &RoutePath, s: f64) -> AgentTrack {
    let (pos, heading) = route.pose_at(s);
    AgentTrack {
        agent_id: 1,
        footprint: Footprint::CAR,
        states: (0..11).map(|k| TrackState { t: k as f64 * 0.1, pos, heading, speed: 0.0 }).collect(),
    }
}

#[test]
fn simple_planner_goes_straight() {
    let r = road();
    let sampler = SamplerConfig::default();
    let sc = scene(&r, 100.0, 2.0, &[]);
    let traj = simple_planner(&sc, &sampler);
    let dir = Vec2::from_heading(sc.ego.heading);
    assert_eq!(traj.poses.len(), 30);
    for (k, p) in traj.poses.iter().enumerate() {
        let expect = sc.ego.position + dir * (2.0 * (k + 1) as f64 * 0.1);
        assert!(p.pos.distance(expect) < 1e-9);
        assert_eq!(p.heading, sc.ego.heading);
    }
    let stopped = simple_planner(&scene(&r, 100.0, 0.0, &[]), &sampler);
    assert!(stopped.poses.iter().all(|p| p.speed == 5.0));
    assert!((stopped.end().pos.distance(stopped.start.pos) - 15.0).abs() < 1e-9);
}

#[test]
fn idm_planner_free_road_accelerates() {
    let r = road();
    let sampler = SamplerConfig::default();
    let traj = idm_planner(&scene(&r, 50.0, 4.0, &[]), &sampler, &IdmParams::default());
    let speeds: Vec<f64> = traj.poses.iter().map(|p| p.speed).collect();
    assert!(speeds.windows(2).all(|w| w[1] > w[0]));
    assert!(*speeds.last().unwrap() < r.route.speed_limit_at(50.0));
}

#[test]
fn idm_planner_stops_behind_parked_leader() {
    let r = road();
    let p = IdmParams::default();
    let sampler = SamplerConfig {
        horizon: 40.0,
        ..SamplerConfig::default()
    };
    let leader_s = 100.0 + 10.0 + Footprint::CAR.length;
    let sc = scene(&r, 100.0, 3.0, &[parked(&r.route, leader_s)]);
    let traj = idm_planner(&sc, &sampler, &p);

    // the same rollout in one dimension
    let v0 = r.route.speed_limit_at(100.0);
    let (mut s, mut v) = (100.0_f64, 3.0_f64);
    for pose in &traj.poses {
        let gap = leader_s - s - Footprint::CAR.length;
        let a = idm_oracle(v, v0, Some(gap), v, &p);
        let v1 = (v + a * 0.1).max(0.0);
        s += 0.5 * (v + v1) * 0.1;
        v = v1;
        assert!((pose.speed - v).abs() < 1e-9);
    }
    let end = traj.end();
    let gap = leader_s - r.route.project(end.pos).s - Footprint::CAR.length;
    assert!(end.speed < 0.05, "final speed {}", end.speed);
    assert!(gap >= p.s0 - 0.1, "gap {gap}");
}

#[test]
fn ttc_cases() {
    let fp = Footprint::CAR;
    let ego = TrackState {
        t: 0.0,
        pos: Vec2::new(0.0, 0.0),
        heading: 0.0,
        speed: 5.0,
    };
    assert_eq!(ttc_at(&ego, &fp, &[], 0.1), TTC_CAP);
    let oncoming = TrackState {
        t: 0.0,
        pos: Vec2::new(10.0 + fp.length, 0.0),
        heading: PI,
        speed: 5.0,
    };
    let t = ttc_at(&ego, &fp, &[(oncoming, fp)], 0.1);
    assert!((t - 1.0).abs() <= 0.05, "ttc {t}");
    let still = TrackState { speed: 0.0, ..ego };
    let parked = TrackState { speed: 0.0, ..oncoming };
    assert_eq!(ttc_at(&still, &fp, &[(parked, fp)], 0.1), TTC_CAP);
}

fn spec() -> ScenarioSpec {
    ScenarioSpec {
        log_id: "test-a".into(),
        start: 0.0,
        end: 12.0,
        route: "r".into(),
        start_s: 40.0,
        goal_s: 140.0,
    }
}

fn rollout(outcome: Outcome, max_s: f64) -> RolloutResult {
    RolloutResult {
        scenario: spec(),
        outcome,
        ego: vec![],
        start_tick: 0,
        max_s,
        progress: 0.0,
        distance: 0.0,
        collision_detail: None,
        steps: vec![],
    }
}

#[test]
fn progress_cases() {
    let sc = spec();
    assert_eq!(compute_progress(&rollout(Outcome::Success, 130.0), &sc), 100.0);
    assert_eq!(compute_progress(&rollout(Outcome::Timeout, 40.0), &sc), 0.0);
    assert_eq!(compute_progress(&rollout(Outcome::Timeout, 10.0), &sc), 0.0);
    assert_eq!(compute_progress(&rollout(Outcome::Timeout, 400.0), &sc), 100.0);

    let r = road();
    let halfway = r.route.pose_at(90.0).0;
    let s = r.route.project(halfway).s;
    let p = compute_progress(&rollout(Outcome::Timeout, s), &sc);
    assert!((p - 50.0).abs() <= 0.5, "progress {p}");
}

fn row(seed: u64, i: usize, success: bool, side: Option<Side>, distance: f64) -> ScenarioMetrics {
    ScenarioMetrics {
        planner: "p".into(),
        seed,
        scenario: format!("s{i}"),
        outcome: if success { "success".into() } else { "mistake".into() },
        success,
        progress: if success { 100.0 } else { 40.0 },
        distance,
        collision_side: side,
        min_ttc: 5.0,
    }
}

#[test]
fn report_all_success() {
    let rows: Vec<_> = (0..4).map(|i| row(0, i, true, None, 50.0)).collect();
    let rep = compute_report(&rows).unwrap();
    assert_eq!(rep.success_pct.mean, Some(100.0));
    assert_eq!(rep.collision_pct.mean, Some(0.0));
    assert_eq!(rep.mdbc.mean, None);
    assert_eq!(rep.mdbc.to_string(), "∞");
}

#[test]
fn report_one_front_collision() {
    let mut rows: Vec<_> = (0..3).map(|i| row(0, i, true, None, 50.0)).collect();
    rows.push(row(0, 3, false, Some(Side::Front), 20.0));
    let rep = compute_report(&rows).unwrap();
    assert_eq!(rep.collision_pct.mean, Some(25.0));
    assert_eq!(
        (rep.collision_back_pct.mean, rep.collision_front_pct.mean, rep.collision_side_pct.mean),
        (Some(0.0), Some(25.0), Some(0.0))
    );
}

#[test]
fn report_mdbc() {
    let rows = vec![
        row(0, 0, true, None, 100.0),
        row(0, 1, true, None, 200.0),
        row(0, 2, false, Some(Side::Back), 300.0),
    ];
    let rep = compute_report(&rows).unwrap();
    assert_eq!(rep.mdbc.mean, Some(600.0));
}

#[test]
fn report_seed_spread() {
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        for i in 0..4 {
            rows.push(row(seed, i, (i as u64) <= seed, None, 10.0));
        }
    }
    let rep = compute_report(&rows).unwrap();
    assert_eq!(rep.per_seed.len(), 3);
    assert_eq!(rep.success_pct.mean, Some(50.0));
    assert_eq!(rep.success_pct.std, Some(25.0));
    assert!(format_table(&[rep.clone()]).contains("50.0±25.0"));
    assert_eq!(compute_report(&rows).unwrap(), rep);
    assert!(compute_report(&[]).is_err());
}

#[test]
fn csv_and_table_layout() {
    let rows = vec![row(1, 0, false, Some(Side::Side), 12.5)];
    let csv = rows_to_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.next(), Some("p,1,s0,mistake,40.0000,12.5000,side,5.0000"));
    let table = format_table(&[compute_report(&rows).unwrap()]);
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn overlapping_test_logs_are_rejected() {
    let train: BTreeSet<String> = ["train-a".to_string()].into();
    assert!(check_disjoint(&[spec()], &train).is_ok());
    let mut bad = spec();
    bad.log_id = "train-a".into();
    assert!(matches!(check_disjoint(&[spec(), bad], &train), Err(Error::TrainTestOverlap(id)) if id == "train-a"));
}

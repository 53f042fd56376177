//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 8 train and evaluate the full default experiment (three
//! training seeds) under `$CARGO_TARGET_TMPDIR/acceptance`; expect 15 to 25
//! minutes on a laptop.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlplan::config::ExperimentConfig;
use vlplan::eval::{compute_report, idm_accel, IdmParams, MetricsReport, ScenarioMetrics};
use vlplan::experiment::{self, parse_curves_csv, Regime, Workspace};
use vlplan::geometry::Vec2;
use vlplan::learn::{
    imitation_loss, td_loss, total_loss, validity_loss, Curves, ExpertSample, FailureSample, NextState, Origin,
    RlTransition,
};
use vlplan::sampler::{Pose, Trajectory};
use vlplan::scorer::{forward_logits, init_params, ScoreDistribution, ScorerDims, ScorerParams};
use vlplan::validity::{check_collision, Side, ValidityRules, Variant, Violation};
use vlplan::world::{AgentTrack, Footprint, SceneTensor, TrackState, FEATURE_DIM};

/// Criteria this implementation does not meet; they still print FAIL.
/// Any other failure makes the run exit non-zero.
const KNOWN_FAILING: &[usize] = &[3, 6, 7, 8];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1, 2

const N_ROWS: usize = 8;
const M: usize = 5;
const FD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;

fn dims() -> ScorerDims {
    ScorerDims {
        features: FEATURE_DIM,
        cand: 6,
        d_model: 5,
        d_head: 4,
        hidden: 7,
    }
}

fn scene(rng: &mut ChaCha8Rng) -> SceneTensor {
    let active = rng.gen_range(1..=N_ROWS);
    SceneTensor {
        capacity: N_ROWS,
        features: (0..N_ROWS * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mask: (0..N_ROWS).map(|i| i < active).collect(),
    }
}

fn cands(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..M).map(|_| (0..dims().cand).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn origin() -> Origin {
    Origin {
        log: "acceptance".into(),
        tick: 0,
    }
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn logits(p: &ScorerParams, scene: &SceneTensor, cands: &[Vec<f64>]) -> Vec<f64> {
    forward_logits(p, scene, cands).unwrap().0
}

// Losses written from their definitions on top of the forward pass.
fn imitation_ref(p: &ScorerParams, s: &ExpertSample) -> f64 {
    let z = logits(p, &s.scene, &s.cands);
    logsumexp(&z) - z[s.expert_index]
}

fn validity_ref(p: &ScorerParams, s: &FailureSample) -> f64 {
    let z = logits(p, &s.scene, &s.cands);
    let valid: Vec<f64> = z.iter().zip(&s.valid_mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    logsumexp(&z) - logsumexp(&valid)
}

fn max_relative_error(p: &ScorerParams, analytic: &[f64], loss: impl Fn(&ScorerParams) -> f64) -> f64 {
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let x = p.as_slice()[i];
        q.as_mut_slice()[i] = x + FD_EPS;
        let up = loss(&q);
        q.as_mut_slice()[i] = x - FD_EPS;
        let down = loss(&q);
        q.as_mut_slice()[i] = x;
        let fd = (up - down) / (2.0 * FD_EPS);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for i in 0..20 {
        let p = init_params(dims(), 1000 + i);
        let e: Vec<ExpertSample> = (0..3)
            .map(|_| ExpertSample {
                origin: origin(),
                scene: scene(&mut rng),
                cands: cands(&mut rng),
                expert_index: rng.gen_range(0..M),
            })
            .collect();
        let f: Vec<FailureSample> = (0..3)
            .map(|_| {
                let mut mask: Vec<bool> = (0..M).map(|_| rng.gen_bool(0.5)).collect();
                mask[rng.gen_range(0..M)] = true;
                mask[rng.gen_range(0..M)] = false;
                FailureSample {
                    origin: origin(),
                    scene: scene(&mut rng),
                    cands: cands(&mut rng),
                    valid_mask: mask,
                }
            })
            .collect();
        let er: Vec<&ExpertSample> = e.iter().collect();
        let fr: Vec<&FailureSample> = f.iter().collect();
        let (wi, wv) = (rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
        let mean_im = |q: &ScorerParams| e.iter().map(|s| imitation_ref(q, s)).sum::<f64>() / e.len() as f64;
        let mean_va = |q: &ScorerParams| f.iter().map(|s| validity_ref(q, s)).sum::<f64>() / f.len() as f64;

        let g = total_loss(&er, &[], &p, 1.0, 0.0).unwrap().grad;
        worst[0] = worst[0].max(max_relative_error(&p, &g.data, mean_im));
        let g = total_loss(&[], &fr, &p, 0.0, 1.0).unwrap().grad;
        worst[1] = worst[1].max(max_relative_error(&p, &g.data, mean_va));
        let g = total_loss(&er, &fr, &p, wi, wv).unwrap().grad;
        worst[2] = worst[2].max(max_relative_error(&p, &g.data, |q| wi * mean_im(q) + wv * mean_va(q)));

        let gamma = 0.9;
        let t = RlTransition {
            scene: scene(&mut rng),
            cands: cands(&mut rng),
            action: rng.gen_range(0..M),
            reward: rng.gen_range(-1.0..1.0),
            next: Some(NextState {
                scene: scene(&mut rng),
                cands: cands(&mut rng),
            }),
        };
        let next = t.next.as_ref().unwrap();
        let target = t.reward + gamma * logits(&p, &next.scene, &next.cands).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let (_, g) = td_loss(&t, &p, gamma).unwrap();
        worst[3] = worst[3].max(max_relative_error(&p, &g.data, |q| {
            (target - logits(q, &t.scene, &t.cands)[t.action]).powi(2)
        }));
    }
    let names = ["imitation", "validity", "composite", "td"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst.iter().all(|&w| w < GRAD_TOL), format!("max relative error: {detail} (< {GRAD_TOL:.0e})"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for m in [2usize, 5, 19, 50] {
        let c = rng.gen_range(-3.0..3.0);
        let (l, g) = imitation_loss(&ScoreDistribution::from_logits(vec![c; m]), rng.gen_range(0..m));
        worst = worst.max((l - (m as f64).ln()).abs()).max(g.iter().sum::<f64>().abs());
        let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let dist = ScoreDistribution::from_logits(z);
        let (l, g) = validity_loss(&dist, &vec![true; m]).unwrap();
        worst = worst.max(l.abs()).max(g.iter().sum::<f64>().abs());
        for _ in 0..50 {
            let (_, g) = imitation_loss(&dist, rng.gen_range(0..m));
            worst = worst.max(g.iter().sum::<f64>().abs());
            let mut mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
            mask[0] = true;
            let (_, g) = validity_loss(&dist, &mask).unwrap();
            worst = worst.max(g.iter().sum::<f64>().abs());
        }
    }
    outcome(worst < IDENTITY_TOL, format!("largest deviation {worst:.1e} (< {IDENTITY_TOL:.0e})"))
}

// ---------------------------------------------------------------- 3

const PAIRS: usize = 1000;
const CLEARANCE_BAND: f64 = 0.01;

fn corners(c: Vec2, h: f64, fp: &Footprint) -> [Vec2; 4] {
    let (f, l) = (Vec2::from_heading(h) * (fp.length / 2.0), Vec2::from_heading(h).perp() * (fp.width / 2.0));
    [c + f + l, c - f + l, c - f - l, c + f - l]
}

fn inside(p: Vec2, poly: &[Vec2; 4]) -> bool {
    // convex, counter-clockwise
    (0..4).all(|i| (poly[(i + 1) % 4] - poly[i]).cross(p - poly[i]) >= 0.0)
}

fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let u = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    p.distance(a + ab * u)
}

fn segments_cross(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let o = |p: Vec2, q: Vec2, r: Vec2| (q - p).cross(r - p);
    o(a, b, c) * o(a, b, d) < 0.0 && o(c, d, a) * o(c, d, b) < 0.0
}

/// Gap between two convex quads; zero when they touch or overlap.
fn clearance(p: &[Vec2; 4], q: &[Vec2; 4]) -> f64 {
    if p.iter().any(|&v| inside(v, q)) || q.iter().any(|&v| inside(v, p)) {
        return 0.0;
    }
    let mut d = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            let (a, b, c, e) = (p[i], p[(i + 1) % 4], q[j], q[(j + 1) % 4]);
            if segments_cross(a, b, c, e) {
                return 0.0;
            }
            d = d.min(seg_dist(a, c, e)).min(seg_dist(c, a, b));
        }
    }
    d
}

/// Points every 5 cm along the outline.
fn outline(p: &[Vec2; 4]) -> Vec<Vec2> {
    let mut pts = Vec::new();
    for i in 0..4 {
        let (a, b) = (p[i], p[(i + 1) % 4]);
        let n = (a.distance(b) / 0.05).ceil() as usize;
        pts.extend((0..n).map(|k| a + (b - a) * (k as f64 / n as f64)));
    }
    pts
}

fn criterion_3() -> Outcome {
    let fp = Footprint::CAR;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut hits, mut excused, mut bad) = (0, 0, 0);
    let mut cases = Vec::new();
    for _ in 0..PAIRS {
        // ego on a constant-curvature arc
        let v = rng.gen_range(0.0..15.0);
        let yaw_rate = rng.gen_range(-0.3..0.3);
        let ego_at = |t: f64| {
            let h = yaw_rate * t;
            let pos = if yaw_rate.abs() < 1e-9 {
                Vec2::new(v * t, 0.0)
            } else {
                Vec2::new(v * h.sin() / yaw_rate, v * (1.0 - h.cos()) / yaw_rate)
            };
            (pos, h)
        };
        // agent on a straight line aimed at a point near the ego path
        let tc = rng.gen_range(0.0..3.0);
        let meet = ego_at(tc).0 + Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let ah = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let av = rng.gen_range(0.0..15.0);
        let a0 = meet - Vec2::from_heading(ah) * (av * tc);
        let agent_at = |t: f64| (a0 + Vec2::from_heading(ah) * (av * t), ah);

        let poses: Vec<Pose> = (1..=30)
            .map(|k| {
                let (pos, heading) = ego_at(k as f64 * 0.1);
                Pose { pos, heading, speed: v }
            })
            .collect();
        let traj = Trajectory {
            start: Pose { pos: Vec2::ZERO, heading: 0.0, speed: v },
            poses,
            dt: 0.1,
        };
        let agent = AgentTrack {
            agent_id: 1,
            footprint: fp,
            states: (0..=30)
                .map(|k| {
                    let (pos, heading) = agent_at(k as f64 * 0.1);
                    TrackState { t: k as f64 * 0.1, pos, heading, speed: av }
                })
                .collect(),
        };
        let fast = check_collision(&traj, &fp, std::slice::from_ref(&agent), 0, 0.0).is_some();

        // dense time: every dt/10 over the checked span, outline points tested for containment
        let dense = (10..=300).any(|j| {
            let t = j as f64 * 0.01;
            let (ep, eh) = ego_at(t);
            let (ap, ah) = agent_at(t);
            let (e, a) = (corners(ep, eh, &fp), corners(ap, ah, &fp));
            outline(&e).iter().any(|&p| inside(p, &a)) || outline(&a).iter().any(|&p| inside(p, &e))
        });
        let min_clear = (1..=30)
            .map(|k| {
                let t = k as f64 * 0.1;
                let (ep, eh) = ego_at(t);
                let (ap, ah) = agent_at(t);
                clearance(&corners(ep, eh, &fp), &corners(ap, ah, &fp))
            })
            .fold(f64::INFINITY, f64::min);
        hits += fast as usize;
        if fast != dense {
            if min_clear < CLEARANCE_BAND {
                excused += 1;
            } else {
                bad += 1;
                cases.push(format!(
                    "[ego {v:.1} m/s, agent {av:.1} m/s at {:.0} deg, {} by the tick check, tick clearance {min_clear:.2} m]",
                    ah.to_degrees(),
                    if fast { "hit" } else { "missed" }
                ));
            }
        }
    }
    outcome(
        bad == 0,
        format!("{PAIRS} pairs, {hits} hits, {excused} disagreements inside the 1 cm band, {bad} outside {}", cases.join(" ")),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cs = ValidityRules::default().with_variant(Variant::CS);
    let c = ValidityRules::default().with_variant(Variant::C);
    let clear = common::stopped(2.0, None);
    let blocked = common::stopped(2.0, Some(3.0));
    let examples = [
        ("stopped 2 s, 0.5 m, clear", clear.stuck(0.5, &cs), true),
        ("1.5 m", clear.stuck(1.5, &cs), false),
        ("front blocked", blocked.stuck(0.5, &cs), false),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, got, want) in examples {
        if got != want {
            ok = false;
            notes.push(format!("{name}: stuck={got}"));
        }
    }
    for s in [&clear, &blocked] {
        for d in [0.0, 0.25, 0.5, 0.99, 1.5] {
            if s.verdict(d, &c).violations.contains(Violation::Stuck) {
                ok = false;
                notes.push(format!("variant C fired Stuck at {d} m"));
            }
        }
    }
    let detail = if notes.is_empty() {
        "three examples exact; variant C never fires Stuck".to_string()
    } else {
        notes.join("; ")
    };
    outcome(ok, detail)
}

// ---------------------------------------------------------------- 5 to 8, 10

struct Pipeline {
    ws: Workspace,
    reports: Vec<MetricsReport>,
    minutes: f64,
}

fn pipeline(cfg: &ExperimentConfig, out: &Path, planners: &[&str]) -> vlplan::Result<Pipeline> {
    let t0 = Instant::now();
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| vlplan::Error::io(out, e))?;
    }
    experiment::gen_data(cfg, out)?;
    let ws = Workspace::open(cfg, out)?;
    for k in 0..cfg.eval.seeds {
        experiment::train(&ws, Regime::Il, k)?;
    }
    for variant in [Variant::C, Variant::CS] {
        let mut c = cfg.clone();
        c.validity.variant = variant;
        let wsv = Workspace::open(&c, out)?;
        for k in 0..cfg.eval.seeds {
            experiment::train(&wsv, Regime::Vl, k)?;
        }
    }
    for regime in [Regime::VlOnExpert, Regime::IlRl] {
        for k in 0..cfg.eval.seeds {
            experiment::train(&ws, regime, k)?;
        }
    }
    let planners: Vec<String> = planners.iter().map(|s| s.to_string()).collect();
    let bench = experiment::evaluate(&ws, &planners)?;
    Ok(Pipeline {
        ws,
        reports: bench.reports,
        minutes: t0.elapsed().as_secs_f64() / 60.0,
    })
}

impl Pipeline {
    fn report(&self, name: &str) -> &MetricsReport {
        self.reports.iter().find(|r| r.planner == name).unwrap()
    }

    fn success(&self, name: &str) -> f64 {
        self.report(name).success_pct.mean.unwrap()
    }

    fn curves(&self, name: &str) -> Vec<Curves> {
        (0..self.ws.cfg.eval.seeds)
            .map(|k| {
                let path = self.ws.paths.curves(name, k);
                parse_curves_csv(&std::fs::read_to_string(path).unwrap()).unwrap()
            })
            .collect()
    }
}

/// Seed-mean of a series; every seed logs at the same steps.
fn seed_mean(curves: &[Curves], series: impl Fn(&Curves) -> &Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let first = series(&curves[0]);
    first
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let sum: f64 = curves.iter().map(|c| series(c)[i].1).sum();
            (step, sum / curves.len() as f64)
        })
        .collect()
}

const MIN_SCENARIOS: usize = 100;

fn criterion_5(p: &Pipeline) -> Outcome {
    let (il, c, cs) = (p.success("il"), p.success("vl-c"), p.success("vl-cs"));
    let col = |n: &str| p.report(n).collision_pct.mean.unwrap();
    let (col_il, col_cs) = (col("il"), col("vl-cs"));
    let n = p.report("il").scenarios;
    let ok = cs >= c && c >= il && cs - il >= 10.0 && col_cs <= 0.7 * col_il && n >= MIN_SCENARIOS && p.minutes < 30.0;
    outcome(
        ok,
        format!(
            "success il {il:.1} / vl-c {c:.1} / vl-cs {cs:.1}; collision il {col_il:.1} / vl-cs {col_cs:.1}; {n} scenarios x {} seeds; {:.1} min",
            p.ws.cfg.eval.seeds, p.minutes
        ),
    )
}

const SPIKE_RATIO: f64 = 1.1;

fn criterion_6(p: &Pipeline) -> Outcome {
    let start = p.ws.cfg.train.steps_il;
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["vl-c", "vl-cs"] {
        let h = seed_mean(&p.curves(name), |c| &c.heldout);
        let pre: Vec<f64> = h.iter().filter(|(s, _)| *s + 100 > start && *s <= start).map(|p| p.1).collect();
        let post = h
            .iter()
            .filter(|(s, _)| *s > start && *s <= start + 200)
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let ratio = post / (pre.iter().sum::<f64>() / pre.len() as f64);
        let gain = p.success(name) - p.success("il-pre");
        ok &= ratio > SPIKE_RATIO && gain > 0.0;
        parts.push(format!("{name} spike x{ratio:.3}, success {:+.1} vs il-pre", gain));
    }
    outcome(ok, format!("{} (spike needs > x{SPIKE_RATIO})", parts.join("; ")))
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let (il, ve) = (p.success("il"), p.success("vl-on-expert"));
    outcome((ve - il).abs() <= 5.0, format!("success il {il:.1}, vl-on-expert {ve:.1}, |diff| {:.1} (<= 5)", (ve - il).abs()))
}

/// Steps after the curve start until its 3-point moving average first
/// covers 90% of the way from its initial to its final value. A curve that
/// ends no higher than it started gets 0.
fn steps_to_90(curve: &[(usize, f64)]) -> usize {
    let n = curve.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let w = &curve[i.saturating_sub(1)..(i + 2).min(n)];
            w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64
        })
        .collect();
    let (first, last) = (smooth[0], smooth[n - 1]);
    let i = smooth.iter().position(|&v| v - first >= 0.9 * (last - first)).unwrap();
    curve[i].0 - curve[0].0
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let vl = seed_mean(&p.curves("vl-cs"), |c| &c.reward);
    let rl = seed_mean(&p.curves("il-rl"), |c| &c.reward);
    let (a, b) = (steps_to_90(&vl), steps_to_90(&rl));
    let span = |c: &[(usize, f64)]| format!("{:.2} -> {:.2}", c[0].1, c[c.len() - 1].1);
    outcome(
        a < b,
        format!(
            "steps to 90% of the reward gain: vl-cs {a} (reward {}), il-rl {b} (reward {})",
            span(&vl),
            span(&rl)
        ),
    )
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for dir in ["data", "models", "curves", "failures", "eval"] {
        if let Ok(rd) = std::fs::read_dir(root.join(dir)) {
            out.extend(rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()));
        }
    }
    out.sort();
    out.into_iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
}

fn same_bytes(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let fa = files(a);
    let mut diff = Vec::new();
    if fa != files(b) {
        diff.push("file sets differ".to_string());
    }
    for f in &fa {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            diff.push(f.display().to_string());
        }
    }
    (fa.len(), diff)
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for s in [
        "logs.duration=30.0",
        "data.train_logs=2",
        "data.val_logs=1",
        "data.test_logs=1",
        "train.steps_il=150",
        "train.steps_vl=150",
        "train.epoch_steps=50",
        "train.collect_fraction=0.2",
        "eval.seeds=2",
        "eval.reward_probe=4",
    ] {
        cfg.set(s).unwrap();
    }
    cfg
}

/// Byte-identical reruns: the whole pipeline at small scale, twice, plus a
/// second gen-data of the full experiment compared with the first.
fn criterion_10(full: &Pipeline, tmp: &Path) -> Outcome {
    let cfg = small_config();
    let planners = ["simple", "idm", "il-pre", "il", "vl-c", "vl-cs", "vl-on-expert", "il-rl"];
    let (a, b) = (tmp.join("det-a"), tmp.join("det-b"));
    if let Err(e) = pipeline(&cfg, &a, &planners).and_then(|_| pipeline(&cfg, &b, &planners)) {
        return outcome(false, format!("small pipeline failed: {e}"));
    }
    let (n_small, mut diff) = same_bytes(&a, &b);

    let regen = tmp.join("det-data");
    let _ = std::fs::remove_dir_all(&regen);
    if let Err(e) = experiment::gen_data(&full.ws.cfg, &regen) {
        return outcome(false, format!("gen-data rerun failed: {e}"));
    }
    let mut n_data = 0;
    for f in files(&regen) {
        n_data += 1;
        if std::fs::read(regen.join(&f)).ok() != std::fs::read(full.ws.paths.root.join(&f)).ok() {
            diff.push(format!("full {}", f.display()));
        }
    }
    outcome(
        diff.is_empty(),
        if diff.is_empty() {
            format!("{n_small} artifacts of a small full pipeline and {n_data} full-scale datasets byte-identical")
        } else {
            format!("differences: {}", diff.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 9, 11

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = IdmParams {
            a_max: rng.gen_range(0.5..3.0),
            b: rng.gen_range(0.5..4.0),
            s0: rng.gen_range(0.5..4.0),
            time_headway: rng.gen_range(0.5..2.5),
            delta: rng.gen_range(1.0..6.0),
        };
        let (v, v0) = (rng.gen_range(0.0..20.0), rng.gen_range(1.0..20.0));
        let gap = rng.gen_bool(0.7).then(|| rng.gen_range(0.5..100.0));
        let dv = rng.gen_range(-10.0..10.0);
        let s_star = gap.map(|_| p.s0 + v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt()));
        let want = p.a_max * (1.0 - (v / v0).powf(p.delta) - gap.map_or(0.0, |s| (s_star.unwrap() / s).powi(2)));
        let got = idm_accel(v, v0, gap, dv, &p);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let p = IdmParams::default();
    let boundary = idm_accel(0.0, 13.0, None, 0.0, &p) == p.a_max && idm_accel(13.0, 13.0, None, 0.0, &p) == 0.0;
    outcome(worst <= 1e-9 && boundary, format!("100 draws, max error {worst:.1e}; free-road boundaries exact: {boundary}"))
}

fn metrics(seed: u64, i: usize, success: bool, side: Option<Side>, distance: f64) -> ScenarioMetrics {
    ScenarioMetrics {
        planner: "p".into(),
        seed,
        scenario: format!("s{i}"),
        outcome: if success { "success" } else { "mistake" }.into(),
        success,
        progress: if success { 100.0 } else { 30.0 },
        distance,
        collision_side: side,
        min_ttc: 3.0,
    }
}

fn criterion_11() -> Outcome {
    let mut notes = Vec::new();
    let all: Vec<_> = (0..4).map(|i| metrics(0, i, true, None, 40.0)).collect();
    let r = compute_report(&all).unwrap();
    if r.success_pct.mean != Some(100.0) || r.collision_pct.mean != Some(0.0) || r.mdbc.mean.is_some() {
        notes.push("all-success vector".to_string());
    }
    let mut one: Vec<_> = (0..3).map(|i| metrics(0, i, true, None, 40.0)).collect();
    one.push(metrics(0, 3, false, Some(Side::Front), 10.0));
    let r = compute_report(&one).unwrap();
    let split = (r.collision_back_pct.mean, r.collision_front_pct.mean, r.collision_side_pct.mean);
    if r.collision_pct.mean != Some(25.0) || split != (Some(0.0), Some(25.0), Some(0.0)) {
        notes.push("1-of-4 front collision vector".to_string());
    }
    let six = vec![
        metrics(0, 0, true, None, 250.0),
        metrics(0, 1, true, None, 250.0),
        metrics(0, 2, false, Some(Side::Side), 100.0),
    ];
    if compute_report(&six).unwrap().mdbc.mean != Some(600.0) {
        notes.push("mdbc vector".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut broken = 0;
    for _ in 0..1000 {
        let seeds = rng.gen_range(1..4u64);
        let mut rows = Vec::new();
        for seed in 0..seeds {
            for i in 0..rng.gen_range(1..12) {
                let side = match rng.gen_range(0..5) {
                    0 => Some(Side::Back),
                    1 => Some(Side::Front),
                    2 => Some(Side::Side),
                    _ => None,
                };
                let success = side.is_none() && rng.gen_bool(0.7);
                rows.push(metrics(seed, i, success, side, rng.gen_range(0.0..200.0)));
            }
        }
        let r = compute_report(&rows).unwrap();
        let sum_ok = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        let per_seed = r.per_seed.iter().all(|s| {
            sum_ok(s.collision_pct, s.collision_back_pct + s.collision_front_pct + s.collision_side_pct)
                && s.collision_pct <= 100.0 - s.success_pct + 1e-9
        });
        let mean = |m: &vlplan::eval::MeanStd| m.mean.unwrap();
        let pooled = sum_ok(
            mean(&r.collision_pct),
            mean(&r.collision_back_pct) + mean(&r.collision_front_pct) + mean(&r.collision_side_pct),
        );
        if !(per_seed && pooled) {
            broken += 1;
        }
    }
    if broken > 0 {
        notes.push(format!("breakdown sum broken in {broken} of 1000 fuzzed sets"));
    }
    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            "unit vectors exact; breakdown sums hold on 1000 fuzzed sets".to_string()
        } else {
            notes.join("; ")
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&tmp).unwrap();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("{} criterion {n}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };

    let t = Instant::now();
    report(1, criterion_1());
    eprintln!("  ({:.1} s)", t.elapsed().as_secs_f64());
    report(2, criterion_2());
    let t = Instant::now();
    report(3, criterion_3());
    eprintln!("  ({:.1} s)", t.elapsed().as_secs_f64());
    report(4, criterion_4());

    let cfg = ExperimentConfig::default();
    let planners = ["simple", "idm", "il-pre", "il", "vl-c", "vl-cs", "vl-on-expert", "il-rl"];
    match pipeline(&cfg, &tmp.join("full"), &planners) {
        Ok(p) => {
            print!("{}", vlplan::eval::format_table(&p.reports));
            report(5, criterion_5(&p));
            report(6, criterion_6(&p));
            report(7, criterion_7(&p));
            report(8, criterion_8(&p));
            report(9, criterion_9());
            report(10, criterion_10(&p, &tmp));
        }
        Err(e) => {
            for n in [5, 6, 7, 8] {
                report(n, outcome(false, format!("pipeline failed: {e}")));
            }
            report(9, criterion_9());
            report(10, outcome(false, format!("pipeline failed: {e}")));
        }
    }
    report(11, criterion_11());

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    println!("{} of {} criteria pass", results.len() - failed.len(), results.len());
    for n in KNOWN_FAILING.iter().filter(|n| !failed.contains(n)) {
        println!("note: criterion {n} is listed as known failing but passed");
    }
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_FAILING.contains(n)).collect();
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

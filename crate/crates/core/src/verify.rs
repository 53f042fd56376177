//! Self-checks run by `vlplan verify`: gradients, loss identities, geometry
//! oracles, and the integrity of artifacts on disk.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{idm_accel, IdmParams};
use crate::geometry::{point_in_polygon, OrientedRect, Vec2};
use crate::learn::{
    imitation_loss, td_loss, total_loss, validity_loss, ExpertSample, FailureSample, NextState, Origin, RlTransition,
};
use crate::logs::{read_dataset, RecordedLog};
use crate::sampler::{Pose, Trajectory};
use crate::scorer::{init_params, load_params, ScoreDistribution, ScorerDims, ScorerParams};
use crate::sim::ScenarioSpec;
use crate::validity::check_collision;
use crate::world::{AgentTrack, Footprint, SceneTensor, TrackState};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn small_dims() -> ScorerDims {
    ScorerDims {
        features: crate::world::FEATURE_DIM,
        cand: 6,
        d_model: 5,
        d_head: 4,
        hidden: 7,
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, active: usize) -> SceneTensor {
    let f = crate::world::FEATURE_DIM;
    SceneTensor {
        capacity: rows,
        features: (0..rows * f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mask: (0..rows).map(|i| i < active).collect(),
    }
}

pub fn random_cands(rng: &mut ChaCha8Rng, m: usize, width: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every parameter.
pub fn gradient_error(params: &ScorerParams, analytic: &[f64], loss: impl Fn(&ScorerParams) -> f64) -> f64 {
    let eps = 1e-4;
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let x = params.as_slice()[i];
        p.as_mut_slice()[i] = x + eps;
        let up = loss(&p);
        p.as_mut_slice()[i] = x - eps;
        let down = loss(&p);
        p.as_mut_slice()[i] = x;
        worst = worst.max(relative_error((up - down) / (2.0 * eps), analytic[i]));
    }
    worst
}

fn origin() -> Origin {
    Origin {
        log: "verify".into(),
        tick: 0,
    }
}

fn gradient_checks(params: &ScorerParams, rng: &mut ChaCha8Rng) -> Vec<Check> {
    let d = *params.dims();
    let expert = ExpertSample {
        origin: origin(),
        scene: random_tensor(rng, 8, 6),
        cands: random_cands(rng, 5, d.cand),
        expert_index: rng.gen_range(0..5),
    };
    let failure = FailureSample {
        origin: origin(),
        scene: random_tensor(rng, 8, 7),
        cands: random_cands(rng, 5, d.cand),
        valid_mask: vec![true, false, true, false, false],
    };
    let transition = RlTransition {
        scene: random_tensor(rng, 8, 8),
        cands: random_cands(rng, 5, d.cand),
        action: 2,
        reward: 0.3,
        next: Some(NextState {
            scene: random_tensor(rng, 8, 5),
            cands: random_cands(rng, 5, d.cand),
        }),
    };
    let mut out = Vec::new();
    let cases: [(&str, f64, f64); 3] = [("imitation", 1.0, 0.0), ("validity", 0.0, 1.0), ("composite", 1.0, 0.7)];
    for (name, wi, wv) in cases {
        let e: Vec<&ExpertSample> = if wi > 0.0 { vec![&expert] } else { vec![] };
        let f: Vec<&FailureSample> = if wv > 0.0 { vec![&failure] } else { vec![] };
        let check = match total_loss(&e, &f, params, wi, wv) {
            Ok(out) if !out.grad.is_finite() => {
                let block = out
                    .grad
                    .data
                    .iter()
                    .position(|g| !g.is_finite())
                    .map(|i| params.block_of(i).name())
                    .unwrap_or("?");
                Check::new(format!("gradient: {name}"), false, format!("non-finite gradient in {block}"))
            }
            Ok(out) => {
                let err = gradient_error(params, &out.grad.data, |p| total_loss(&e, &f, p, wi, wv).unwrap().loss);
                Check::new(format!("gradient: {name}"), err < 1e-4, format!("max relative error {err:.2e}"))
            }
            Err(e) => Check::new(format!("gradient: {name}"), false, e.to_string()),
        };
        out.push(check);
    }
    let check = match td_loss(&transition, params, 0.9) {
        Ok((_, g)) => {
            let err = gradient_error(params, &g.data, |p| {
                // the bootstrap term is held at the unperturbed parameters
                let (qn, _) = crate::scorer::forward_logits(params, &transition.next.as_ref().unwrap().scene, &transition.next.as_ref().unwrap().cands).unwrap();
                let (q, _) = crate::scorer::forward_logits(p, &transition.scene, &transition.cands).unwrap();
                let target = transition.reward + 0.9 * qn.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (target - q[transition.action]).powi(2)
            });
            Check::new("gradient: td", err < 1e-4, format!("max relative error {err:.2e}"))
        }
        Err(e) => Check::new("gradient: td", false, e.to_string()),
    };
    out.push(check);
    out
}

fn loss_identities() -> Vec<Check> {
    let mut out = Vec::new();
    for m in [2usize, 5, 19] {
        let dist = ScoreDistribution::from_logits(vec![0.3; m]);
        let (l, g) = imitation_loss(&dist, 0);
        let ok = (l - (m as f64).ln()).abs() < 1e-9 && g.iter().sum::<f64>().abs() < 1e-9;
        out.push(Check::new(format!("identity: uniform imitation M={m}"), ok, format!("loss {l}")));
        let (lv, gv) = validity_loss(&dist, &vec![true; m]).unwrap();
        let ok = lv.abs() < 1e-9 && gv.iter().sum::<f64>().abs() < 1e-9;
        out.push(Check::new(format!("identity: all-valid validity M={m}"), ok, format!("loss {lv}")));
    }
    out
}

fn collision_oracle(rng: &mut ChaCha8Rng, pairs: usize) -> Check {
    let fp = Footprint::CAR;
    let mut disagreements = 0;
    for _ in 0..pairs {
        let v = rng.gen_range(0.0..12.0);
        let h: f64 = rng.gen_range(-0.3..0.3);
        let start = Pose {
            pos: Vec2::ZERO,
            heading: 0.0,
            speed: v,
        };
        let poses: Vec<Pose> = (1..=30)
            .map(|k| {
                let t = k as f64 * 0.1;
                Pose {
                    pos: Vec2::new(v * t * h.cos(), v * t * h.sin()),
                    heading: h,
                    speed: v,
                }
            })
            .collect();
        let traj = Trajectory { start, poses, dt: 0.1 };
        let p0 = Vec2::new(rng.gen_range(-5.0..40.0), rng.gen_range(-8.0..8.0));
        let ah = rng.gen_range(-3.2..3.2);
        let av = rng.gen_range(0.0..8.0);
        let states: Vec<TrackState> = (0..=30)
            .map(|k| TrackState {
                t: k as f64 * 0.1,
                pos: p0 + Vec2::from_heading(ah) * (av * k as f64 * 0.1),
                heading: ah,
                speed: av,
            })
            .collect();
        let agent = AgentTrack {
            agent_id: 1,
            footprint: fp,
            states,
        };
        let fast = check_collision(&traj, &fp, std::slice::from_ref(&agent), 0, 0.0).is_some();
        // dense point-in-polygon sampling at every tick
        let dense = (1..=30).any(|k| {
            let e = OrientedRect::new(traj.poses[k - 1].pos, h, fp.length, fp.width);
            let a = agent.rect_at(k as i64);
            let (ec, ac) = (e.corners(), a.corners());
            let grid = |r: &OrientedRect, other: &[Vec2; 4]| {
                (0..=20).any(|i| {
                    (0..=10).any(|j| {
                        let u = (i as f64 / 10.0 - 1.0) * r.half_length;
                        let w = (j as f64 / 5.0 - 1.0) * r.half_width;
                        let p = r.center + Vec2::from_heading(r.heading) * u + Vec2::from_heading(r.heading).perp() * w;
                        point_in_polygon(p, other)
                    })
                })
            };
            grid(&e, &ac) || grid(&a, &ec)
        });
        if fast != dense {
            disagreements += 1;
        }
    }
    Check::new(
        "oracle: collision",
        disagreements * 100 <= pairs,
        format!("{disagreements} of {pairs} disagree with point sampling"),
    )
}

fn idm_identities() -> Check {
    let p = IdmParams::default();
    let a0 = idm_accel(0.0, 12.0, None, 0.0, &p);
    let a1 = idm_accel(12.0, 12.0, None, 0.0, &p);
    let ok = a0 == p.a_max && a1 == 0.0;
    Check::new("identity: idm free road", ok, format!("a(0)={a0}, a(v0)={a1}"))
}

fn dataset_check<T: crate::logs::DatasetRecord>(path: &Path) -> Check {
    let name = format!("manifest: {}", path.display());
    match read_dataset::<T>(path) {
        Ok((records, _)) => Check::new(name, true, format!("{} records", records.len())),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// All checks. When `out` holds artifacts, model files and datasets are
/// checked too.
pub fn run_checks(dims: &ScorerDims, out: Option<&Path>, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = gradient_checks(&init_params(small_dims(), seed), &mut rng);
    checks.extend(loss_identities());
    checks.push(collision_oracle(&mut rng, 300));
    checks.push(idm_identities());
    let Some(out) = out else {
        return checks;
    };
    let mut models: Vec<_> = std::fs::read_dir(out.join("models"))
        .map(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).collect())
        .unwrap_or_default();
    models.sort();
    for path in models {
        let name = format!("model: {}", path.display());
        let check = match load_params(&path, dims) {
            Ok(params) => match params.first_non_finite_block() {
                Some(b) => Check::new(name, false, format!("non-finite values in parameter block {}", b.name())),
                None => {
                    let mut c = gradient_checks_model(&params, &mut rng);
                    c.name = name;
                    c
                }
            },
            Err(e) => Check::new(name, false, e.to_string()),
        };
        checks.push(check);
    }
    let data = out.join("data");
    if data.exists() {
        checks.push(dataset_check::<RecordedLog>(&data.join("logs.jsonl")));
        for split in ["train", "val", "test"] {
            checks.push(dataset_check::<ScenarioSpec>(&data.join(format!("scenarios-{split}.jsonl"))));
        }
        for split in ["train", "val"] {
            checks.push(dataset_check::<ExpertSample>(&data.join(format!("expert-{split}.jsonl"))));
        }
    }
    let mut failures: Vec<_> = std::fs::read_dir(out.join("failures"))
        .map(|d| {
            d.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect()
        })
        .unwrap_or_default();
    failures.sort();
    for path in failures {
        checks.push(dataset_check::<FailureSample>(&path));
    }
    checks
}

/// Gradient of the imitation loss on a random instance at the given
/// parameters must be finite.
fn gradient_checks_model(params: &ScorerParams, rng: &mut ChaCha8Rng) -> Check {
    let d = *params.dims();
    let rows = 8;
    let expert = ExpertSample {
        origin: origin(),
        scene: random_tensor(rng, rows, rows),
        cands: random_cands(rng, 5, d.cand),
        expert_index: 0,
    };
    match total_loss(&[&expert], &[], params, 1.0, 0.0) {
        Ok(out) if out.grad.is_finite() && out.loss.is_finite() => Check::new("", true, "finite loss and gradient"),
        Ok(out) => {
            let block = out
                .grad
                .data
                .iter()
                .position(|g| !g.is_finite())
                .map(|i| params.block_of(i).name())
                .unwrap_or("?");
            Check::new("", false, format!("non-finite gradient in parameter block {block}"))
        }
        Err(e) => Check::new("", false, e.to_string()),
    }
}

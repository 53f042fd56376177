//! The end-to-end pipeline behind the command line: data generation,
//! training regimes, evaluation and self-checks.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, write_benchmark, BenchmarkEntry, BenchmarkOutput};
use crate::learn::{
    train_il_rl, train_vl_closed_loop, ClosedLoop, Curves, ExpertSample, FailureSample, Origin, Trainer,
};
use crate::logs::{
    build_expert_dataset, quantize_rows, quantize_tensor, quantized, read_dataset, read_manifest, run_scripted_expert,
    segment_log, write_dataset, DatasetManifest, DatasetRecord, LogTemplate, RecordedLog, SCHEMA_VERSION,
};
use crate::sampler::generate_candidates;
use crate::scorer::{init_params, load_params, save_params, ScorerParams};
use crate::sim::{
    features, sample_scenarios, ExpertReplay, IdmPlanner, LearnedPlanner, Planner, ScenarioSpec, SimContext,
    SimplePlanner,
};
use crate::validity::{evaluate_candidate_set, Future, ValidityRules, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Fixed relative layout of everything written under the output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn logs(&self) -> PathBuf {
        self.data("logs")
    }

    pub fn scenarios(&self, split: Split) -> PathBuf {
        self.data(&format!("scenarios-{}", split.name()))
    }

    pub fn expert(&self, split: Split) -> PathBuf {
        self.data(&format!("expert-{}", split.name()))
    }

    pub fn model(&self, name: &str, seed_index: usize) -> PathBuf {
        self.root.join("models").join(format!("{name}-s{seed_index}.bin"))
    }

    pub fn curves(&self, name: &str, seed_index: usize) -> PathBuf {
        self.root.join("curves").join(format!("{name}-s{seed_index}.csv"))
    }

    pub fn failures(&self, name: &str, seed_index: usize) -> PathBuf {
        self.root.join("failures").join(format!("{name}-s{seed_index}.jsonl"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn manifest_for<T>(kind: &str, records: &[T], scenarios: usize, cfg: &ExperimentConfig, logs: &[&RecordedLog]) -> DatasetManifest {
    DatasetManifest {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        samples: records.len(),
        scenarios,
        config_hash: cfg.data_hash(),
        seed_lineage: std::iter::once(cfg.seed).chain(logs.iter().map(|l| l.seed)).collect(),
        layout: cfg.layout.descriptor().to_string(),
        logs: logs.iter().map(|l| l.id.clone()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSummary {
    pub logs: usize,
    pub scenarios: [usize; 3],
    pub expert_train: usize,
    pub expert_val: usize,
    /// True when existing data matched the config and nothing was written.
    pub reused: bool,
}

impl fmt::Display for DataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} logs; scenarios train/val/test {}/{}/{}; expert samples train {}, val {}{}",
            self.logs,
            self.scenarios[0],
            self.scenarios[1],
            self.scenarios[2],
            self.expert_train,
            self.expert_val,
            if self.reused { " (up to date)" } else { "" }
        )
    }
}

fn log_plan(cfg: &ExperimentConfig) -> Vec<(Split, LogTemplate, usize)> {
    let mut out = Vec::new();
    for (split, n) in [
        (Split::Train, cfg.data.train_logs),
        (Split::Val, cfg.data.val_logs),
        (Split::Test, cfg.data.test_logs),
    ] {
        for &t in &cfg.data.templates {
            for i in 0..n {
                out.push((split, t, i));
            }
        }
    }
    out
}

pub fn log_split(id: &str) -> Option<Split> {
    match id.split('-').next()? {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

fn existing_data(cfg: &ExperimentConfig, paths: &Paths) -> Option<DataSummary> {
    let hash = cfg.data_hash();
    let names = [
        paths.logs(),
        paths.scenarios(Split::Train),
        paths.scenarios(Split::Val),
        paths.scenarios(Split::Test),
        paths.expert(Split::Train),
        paths.expert(Split::Val),
    ];
    let manifests: Vec<DatasetManifest> = names.iter().map(|p| read_manifest(p).ok()).collect::<Option<_>>()?;
    if manifests.iter().any(|m| m.config_hash != hash) || names.iter().any(|p| !p.exists()) {
        return None;
    }
    Some(DataSummary {
        logs: manifests[0].samples,
        scenarios: [manifests[1].samples, manifests[2].samples, manifests[3].samples],
        expert_train: manifests[4].samples,
        expert_val: manifests[5].samples,
        reused: true,
    })
}

/// Worlds, expert logs, scenarios and expert datasets.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DataSummary> {
    cfg.validate()?;
    let paths = Paths::new(out);
    if let Some(summary) = existing_data(cfg, &paths) {
        return Ok(summary);
    }
    let plan = log_plan(cfg);
    let logs: Vec<RecordedLog> = plan
        .par_iter()
        .map(|&(split, template, i)| {
            let id = format!("{}-{}-{i:03}", split.name(), template.name());
            let seed = derive_seed(cfg.seed, &id);
            run_scripted_expert(template, &cfg.logs, &cfg.validity, &cfg.sampler, cfg.replan_ticks(), &id, seed)
                .and_then(|log| quantized(&log))
        })
        .collect::<Result<_>>()?;
    let mut scenarios: [Vec<ScenarioSpec>; 3] = Default::default();
    let mut by_split: [Vec<&RecordedLog>; 3] = Default::default();
    for (log, &(split, _, _)) in logs.iter().zip(&plan) {
        scenarios[split as usize].extend(segment_log(log, &cfg.segmentation)?);
        by_split[split as usize].push(log);
    }
    let expert_train = build_expert_dataset(&logs, &scenarios[0], &cfg.sampler, &cfg.layout, cfg.replan_ticks())?;
    let expert_val = build_expert_dataset(&logs, &scenarios[1], &cfg.sampler, &cfg.layout, cfg.replan_ticks())?;

    let all: Vec<&RecordedLog> = logs.iter().collect();
    write_dataset(&paths.logs(), &logs, &manifest_for("logs", &logs, 0, cfg, &all))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let sc = &scenarios[split as usize];
        let m = manifest_for(ScenarioSpec::KIND, sc, sc.len(), cfg, &by_split[split as usize]);
        write_dataset(&paths.scenarios(split), sc, &m)?;
    }
    for (split, data) in [(Split::Train, &expert_train), (Split::Val, &expert_val)] {
        let n = scenarios[split as usize].len();
        let m = manifest_for(ExpertSample::KIND, data, n, cfg, &by_split[split as usize]);
        write_dataset(&paths.expert(split), data, &m)?;
    }
    Ok(DataSummary {
        logs: logs.len(),
        scenarios: [scenarios[0].len(), scenarios[1].len(), scenarios[2].len()],
        expert_train: expert_train.len(),
        expert_val: expert_val.len(),
        reused: false,
    })
}

fn require<T: DatasetRecord>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{} (run gen-data first)", path.display())));
    }
    Ok(read_dataset(path)?.0)
}

/// Loaded datasets and the simulation context over all logs.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub paths: Paths,
    pub ctx: SimContext,
    pub expert_train: Vec<ExpertSample>,
    pub expert_val: Vec<ExpertSample>,
    pub scenarios_train: Vec<ScenarioSpec>,
    pub scenarios_test: Vec<ScenarioSpec>,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let paths = Paths::new(out);
        let logs: Vec<RecordedLog> = require(&paths.logs())?;
        let manifest = read_manifest(&paths.logs())?;
        if manifest.config_hash != cfg.data_hash() {
            return Err(Error::MissingPrerequisite(format!(
                "{} was generated from a different config (run gen-data)",
                paths.logs().display()
            )));
        }
        let ctx = SimContext::new(logs, cfg.sampler.clone(), cfg.layout.clone(), cfg.sim.clone())?;
        Ok(Self {
            expert_train: require(&paths.expert(Split::Train))?,
            expert_val: require(&paths.expert(Split::Val))?,
            scenarios_train: require(&paths.scenarios(Split::Train))?,
            scenarios_test: require(&paths.scenarios(Split::Test))?,
            cfg: cfg.clone(),
            paths,
            ctx,
        })
    }

    pub fn training_logs(&self) -> BTreeSet<String> {
        self.ctx
            .logs()
            .filter(|l| log_split(&l.id) != Some(Split::Test))
            .map(|l| l.id.clone())
            .collect()
    }

    /// Training seed of the `k`-th run.
    pub fn train_seed(&self, k: usize) -> u64 {
        derive_seed(self.cfg.seed, &format!("train-{k}"))
    }

    pub fn probe(&self) -> Result<Vec<ScenarioSpec>> {
        let n = self.scenarios_train.len();
        let k = self.cfg.eval.reward_probe.min(n);
        if k == 0 {
            return Ok(Vec::new());
        }
        let idx = sample_scenarios(n, k as f64 / n as f64, derive_seed(self.cfg.seed, "probe"))?;
        Ok(idx.into_iter().map(|i| self.scenarios_train[i].clone()).collect())
    }

    fn load_model(&self, name: &str, k: usize) -> Result<ScorerParams> {
        let path = self.paths.model(name, k);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!("{} (train {name} first)", path.display())));
        }
        load_params(&path, &self.cfg.scorer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Il,
    Vl,
    IlRl,
    VlOnExpert,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "il" => Ok(Regime::Il),
            "vl" => Ok(Regime::Vl),
            "il-rl" => Ok(Regime::IlRl),
            "vl-on-expert" => Ok(Regime::VlOnExpert),
            _ => Err(Error::Config(format!("unknown regime {s:?} (il, vl, il-rl, vl-on-expert)"))),
        }
    }
}

impl Regime {
    /// Name of the produced model; `vl` carries the rule variant.
    pub fn model_name(self, variant: Variant) -> String {
        match self {
            Regime::Il => "il".into(),
            Regime::Vl => format!("vl-{}", variant.tag()),
            Regime::IlRl => "il-rl".into(),
            Regime::VlOnExpert => "vl-on-expert".into(),
        }
    }
}

pub const IL_PRETRAIN: &str = "il-pre";

pub fn curves_csv(c: &Curves) -> String {
    let mut out = String::from("series,step,value\n");
    for (name, series) in [
        ("train", &c.train),
        ("imitation", &c.imitation),
        ("validity", &c.validity),
        ("td", &c.td),
        ("heldout_imitation", &c.heldout),
        ("reward", &c.reward),
    ] {
        for (step, v) in series {
            out.push_str(&format!("{name},{step},{v:.9e}\n"));
        }
    }
    out
}

pub fn parse_curves_csv(text: &str) -> Result<Curves> {
    let mut c = Curves::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::SchemaMismatch(format!("curves line {}: {line:?}", i + 1));
        let mut parts = line.split(',');
        let (Some(name), Some(step), Some(value), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let point = (step.parse().map_err(|_| bad())?, value.parse().map_err(|_| bad())?);
        match name {
            "train" => c.train.push(point),
            "imitation" => c.imitation.push(point),
            "validity" => c.validity.push(point),
            "td" => c.td.push(point),
            "heldout_imitation" => c.heldout.push(point),
            "reward" => c.reward.push(point),
            _ => return Err(bad()),
        }
    }
    Ok(c)
}

fn read_curves(path: &Path) -> Result<Curves> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{} (run `train --regime il` first)", path.display())));
    }
    parse_curves_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_model(path: &Path, params: &ScorerParams) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_params(params, path)
}

/// Validity masks for expert states, used as the failure set of the
/// VL-on-expert ablation.
pub fn expert_masks(ws: &Workspace, rules: &ValidityRules) -> Result<Vec<FailureSample>> {
    ws.expert_train
        .par_iter()
        .map(|s| {
            let log = ws.ctx.log(&s.origin.log)?;
            let scene = log.scene_at(s.origin.tick, ws.cfg.layout.history)?;
            let cands = generate_candidates(&scene, &ws.cfg.sampler)?;
            let future = Future {
                agents: &log.agents,
                ego_history: &log.ego.states[..=s.origin.tick as usize],
            };
            let report = evaluate_candidate_set(&cands, &scene, &future, rules);
            let (mut tensor, mut vecs) = features(&scene, &cands, &ws.cfg.layout)?;
            quantize_tensor(&mut tensor);
            quantize_rows(&mut vecs);
            Ok(FailureSample {
                origin: Origin {
                    log: s.origin.log.clone(),
                    tick: s.origin.tick,
                },
                scene: tensor,
                cands: vecs,
                valid_mask: report.valid_mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub steps: usize,
    pub final_heldout: Option<f64>,
    pub failure_samples: Option<usize>,
}

/// Trains one regime for training run `k`. `il` writes both the pretrained
/// checkpoint and the IL baseline; the other regimes start from the former.
pub fn train(ws: &Workspace, regime: Regime, k: usize) -> Result<TrainSummary> {
    let cfg = &ws.cfg;
    let tc = &cfg.train;
    let seed = ws.train_seed(k);
    let variant = cfg.validity.variant;
    let name = regime.model_name(variant);
    let rules = cfg.validity.clone();
    let probe_rules = cfg.validity.with_variant(Variant::C);
    let probe = ws.probe()?;
    let cl = ClosedLoop {
        ctx: &ws.ctx,
        pool: &ws.scenarios_train,
        probe: &probe,
        rules: &rules,
        probe_rules: &probe_rules,
    };
    let mut failure_count = None;
    let (params, curves) = match regime {
        Regime::Il => {
            if ws.expert_train.is_empty() {
                return Err(Error::MissingPrerequisite("expert dataset is empty".into()));
            }
            let mut t = Trainer::new(init_params(cfg.scorer, seed), tc, seed);
            t.il_steps(&ws.expert_train, tc.steps_il, Some(&ws.expert_val))?;
            save_model(&ws.paths.model(IL_PRETRAIN, k), &t.params)?;
            write_text(&ws.paths.curves(IL_PRETRAIN, k), &curves_csv(&t.curves))?;
            t.il_steps(&ws.expert_train, tc.steps_vl, Some(&ws.expert_val))?;
            (t.params, t.curves)
        }
        Regime::Vl | Regime::VlOnExpert => {
            let pre = ws.load_model(IL_PRETRAIN, k)?;
            let (initial, collect) = if regime == Regime::VlOnExpert {
                (expert_masks(ws, &rules)?, false)
            } else {
                (Vec::new(), true)
            };
            let out = train_vl_closed_loop(
                pre,
                &ws.expert_train,
                &ws.expert_val,
                initial,
                collect,
                &cl,
                tc,
                tc.steps_il,
                derive_seed(seed, &name),
            )?;
            let path = ws.paths.failures(&name, k);
            let m = manifest_for(FailureSample::KIND, &out.failures, 0, cfg, &[]);
            write_dataset(&path, &out.failures, &m)?;
            failure_count = Some(out.failures.len());
            (out.params, out.curves)
        }
        Regime::IlRl => {
            let pre = ws.load_model(IL_PRETRAIN, k)?;
            let out = train_il_rl(pre, &ws.expert_train, &ws.expert_val, &cl, tc, tc.steps_il, derive_seed(seed, &name))?;
            (out.params, out.curves)
        }
    };
    let mut curves = curves;
    if regime != Regime::Il {
        // the fine-tuning regimes report the whole schedule, IL phase included
        curves.prepend(&read_curves(&ws.paths.curves(IL_PRETRAIN, k))?, tc.steps_il);
    }
    let model = ws.paths.model(&name, k);
    save_model(&model, &params)?;
    write_text(&ws.paths.curves(&name, k), &curves_csv(&curves))?;
    Ok(TrainSummary {
        model,
        steps: curves.train.last().map_or(0, |p| p.0 + 1),
        final_heldout: curves.heldout.last().map(|h| h.1),
        failure_samples: failure_count,
    })
}

/// Planner for a benchmark name and training run.
pub fn planner_for(ws: &Workspace, name: &str, k: usize) -> Result<Arc<dyn Planner>> {
    Ok(match name {
        "simple" => Arc::new(SimplePlanner),
        "idm" => Arc::new(IdmPlanner { params: ws.cfg.idm }),
        "expert" => Arc::new(ExpertReplay),
        _ => Arc::new(LearnedPlanner {
            params: Arc::new(ws.load_model(name, k)?),
        }),
    })
}

/// Runs the benchmark over the test split. Every planner is evaluated under
/// the variant-C rules.
pub fn evaluate(ws: &Workspace, planners: &[String]) -> Result<BenchmarkOutput> {
    let mut entries = Vec::new();
    for k in 0..ws.cfg.eval.seeds {
        for name in planners {
            entries.push(BenchmarkEntry {
                name: name.clone(),
                seed: k as u64,
                planner: planner_for(ws, name, k)?,
            });
        }
    }
    let rules = ws.cfg.validity.with_variant(Variant::C);
    let out = run_benchmark(&entries, &ws.scenarios_test, &ws.ctx, &rules, &ws.training_logs())?;
    write_benchmark(&ws.paths.eval_dir(), &out)?;
    Ok(out)
}

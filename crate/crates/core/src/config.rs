//! Experiment configuration: one TOML file with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::IdmParams;
use crate::learn::TrainConfig;
use crate::logs::{LogGenConfig, LogTemplate, SegmentationConfig};
use crate::sampler::SamplerConfig;
use crate::scorer::ScorerDims;
use crate::sim::SimConfig;
use crate::validity::ValidityRules;
use crate::world::{FeatureLayout, FEATURE_DIM};

/// How many logs of each template go into each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub templates: Vec<LogTemplate>,
    pub train_logs: usize,
    /// Logs whose expert samples track held-out imitation loss.
    pub val_logs: usize,
    pub test_logs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            templates: vec![LogTemplate::StraightRoad, LogTemplate::FourWay, LogTemplate::TIntersection],
            train_logs: 10,
            val_logs: 1,
            test_logs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Training seeds per learned planner; results report mean and stddev.
    pub seeds: usize,
    pub planners: Vec<String>,
    /// Training scenarios rolled out greedily for the reward curve.
    pub reward_probe: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            planners: ["simple", "idm", "il", "vl-c", "vl-cs", "vl-on-expert", "il-rl"]
                .map(String::from)
                .to_vec(),
            reward_probe: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub logs: LogGenConfig,
    pub data: DataConfig,
    pub segmentation: SegmentationConfig,
    pub sampler: SamplerConfig,
    pub validity: ValidityRules,
    pub layout: FeatureLayout,
    pub scorer: ScorerDims,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    pub idm: IdmParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            logs: LogGenConfig::default(),
            data: DataConfig::default(),
            segmentation: SegmentationConfig::default(),
            sampler: SamplerConfig::default(),
            validity: ValidityRules::default(),
            layout: FeatureLayout::default(),
            scorer: ScorerDims::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
            idm: IdmParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` with a dotted key; the value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: serde_json::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(t) => serde_json::to_value(&t["v"])?,
            Err(_) => serde_json::Value::String(raw.to_string()),
        };
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = value;
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.validity.validate()?;
        self.train.validate()?;
        if (self.logs.dt - self.sampler.dt).abs() > 1e-12 {
            return Err(Error::Config("log tick and sampler tick differ".into()));
        }
        if self.logs.tail + 1e-9 < self.sampler.horizon {
            return Err(Error::Config("log tail shorter than the planning horizon".into()));
        }
        if self.scorer.features != FEATURE_DIM {
            return Err(Error::Config(format!("scorer.features must be {FEATURE_DIM}")));
        }
        if self.scorer.cand != 3 * self.layout.waypoints {
            return Err(Error::Config("scorer.cand must be 3 x layout.waypoints".into()));
        }
        if self.layout.waypoints == 0 || self.layout.waypoints > self.sampler.steps() {
            return Err(Error::Config("layout.waypoints must lie in [1, horizon ticks]".into()));
        }
        if self.layout.history < 1 {
            return Err(Error::Config("layout.history must be >= 1".into()));
        }
        let replan = self.sim.replan_period / self.sampler.dt;
        if replan < 1.0 || (replan - replan.round()).abs() > 1e-9 || self.sim.replan_period > self.sampler.horizon {
            return Err(Error::Config("replan period must be a tick multiple within the horizon".into()));
        }
        if !(self.segmentation.stride > 0.0 && self.segmentation.stride <= self.segmentation.window) {
            return Err(Error::Config("segmentation needs 0 < stride <= window".into()));
        }
        if self.data.templates.is_empty() || self.data.train_logs == 0 || self.data.test_logs == 0 {
            return Err(Error::Config("data needs templates and train/test logs".into()));
        }
        if self.eval.seeds == 0 {
            return Err(Error::Config("eval.seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn replan_ticks(&self) -> usize {
        (self.sim.replan_period / self.sampler.dt).round() as usize
    }

    /// SHA-256 of the canonical JSON form (keys sorted, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hash_json(&value)
    }

    /// Hash of the parts that determine the generated data.
    pub fn data_hash(&self) -> String {
        let value = serde_json::json!({
            "seed": self.seed,
            "logs": self.logs,
            "data": self.data,
            "segmentation": self.segmentation,
            "sampler": self.sampler,
            "layout": self.layout,
            "replan": self.sim.replan_period,
            "validity": self.validity.with_variant(crate::validity::Variant::C),
        });
        hash_json(&value)
    }
}

pub fn hash_json(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).expect("json serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}

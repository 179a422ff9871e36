//! JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetConfig;
use crate::sampler::SamplerConfig;
use crate::schedules::{DiscreteSchedule, GaussianSchedule};
use crate::trainer::{make_default_plan, LrSchedule, Scale, Stage, StagePlan};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn image_default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    pub fn mask_default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.02,
            beta_end: 0.5,
        }
    }
}

/// Per-stage changes applied on top of the default plan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<LrSchedule>,
    /// Multiplier on every rate of the stage's schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
    pub sample: Vec<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            model: 0,
            train: 0,
            sample: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            log_every: 10,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Scenes sampled together in one batch.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ckpt_dir: Option<PathBuf>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_lambda() -> f64 {
    1.0
}

fn image_default() -> ScheduleConfig {
    ScheduleConfig::image_default()
}

fn mask_default() -> ScheduleConfig {
    ScheduleConfig::mask_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default = "image_default")]
    pub image_schedule: ScheduleConfig,
    #[serde(default = "mask_default")]
    pub mask_schedule: ScheduleConfig,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub stages: BTreeMap<Stage, StageOverride>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            net: NetConfig::default(),
            image_schedule: ScheduleConfig::image_default(),
            mask_schedule: ScheduleConfig::mask_default(),
            scale: Scale::Desk,
            stages: BTreeMap::new(),
            lambda: 1.0,
            sampler: SamplerConfig::default(),
            seeds: Seeds::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every field written out, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} unsupported", self.version)));
        }
        self.net.validate()?;
        if self.image_schedule.steps != self.mask_schedule.steps {
            return Err(Error::Config("image and mask chains must have the same step count".into()));
        }
        self.image_schedule()?;
        self.mask_schedule()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        let s = &self.sampler;
        if s.steps == 0 || s.steps > self.image_schedule.steps || !(0.0..=1.0).contains(&s.eta) {
            return Err(Error::Config(format!(
                "sampler needs 1 <= steps <= {} and eta in [0, 1]",
                self.image_schedule.steps
            )));
        }
        if self.seeds.sample.is_empty() {
            return Err(Error::Config("at least one sampling seed is required".into()));
        }
        if self.train.log_every == 0 || self.eval.batch == 0 {
            return Err(Error::Config("log_every and eval batch must be positive".into()));
        }
        if self.train.checkpoint_every % self.train.log_every != 0 {
            return Err(Error::Config("checkpoint_every must be a multiple of log_every".into()));
        }
        for plan in self.plan() {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn image_schedule(&self) -> Result<GaussianSchedule> {
        let c = &self.image_schedule;
        GaussianSchedule::linear(c.steps, c.beta_start, c.beta_end).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mask_schedule(&self) -> Result<DiscreteSchedule> {
        let c = &self.mask_schedule;
        DiscreteSchedule::linear(c.steps, self.net.classes, c.beta_start, c.beta_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Default plan at the configured scale with the overrides applied.
    pub fn plan(&self) -> Vec<StagePlan> {
        make_default_plan(self.scale)
            .into_iter()
            .map(|mut p| {
                if let Some(o) = self.stages.get(&p.stage) {
                    if let Some(i) = o.iterations {
                        p.iterations = i;
                    }
                    if let Some(b) = o.batch {
                        p.batch = b;
                    }
                    if let Some(lr) = o.lr {
                        p.lr = lr;
                    }
                    if let Some(f) = o.lr_scale {
                        p.lr = p.lr.scaled(f);
                    }
                }
                p
            })
            .collect()
    }

    pub fn stage_plan(&self, stage: Stage) -> StagePlan {
        self.plan()[stage.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_takes_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.sampler.steps, 50);
        assert_eq!(c.sampler.eta, 1.0);
        assert_eq!(c.image_schedule.steps, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"lamda": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"net": {"classes": 6, "extra": 1}}"#).is_err());
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let mut c = RunConfig::default();
        c.stages.insert(
            Stage::Seg2imgPretrain,
            StageOverride {
                lr_scale: Some(10.0),
                ..Default::default()
            },
        );
        c.lambda = 0.5;
        let a = c.to_json();
        let b = RunConfig::from_json(&a).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_json(
            r#"{"stages": {"segdm_train": {"iterations": 7, "lr_scale": 2.0}, "srdm_joint": {"lr": {"kind": "fixed", "lr": 0.001}}}}"#,
        )
        .unwrap();
        let p = c.stage_plan(Stage::SegdmTrain);
        assert_eq!(p.iterations, 7);
        assert_eq!(
            p.lr,
            LrSchedule::Halving {
                lr0: 3e-4,
                every: 200,
                floor: 1e-6
            }
        );
        assert_eq!(c.stage_plan(Stage::SrdmJoint).lr, LrSchedule::Fixed { lr: 1e-3 });
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lambda": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"steps": 0, "eta": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mask_schedule": {"steps": 10, "beta_start": 0.1, "beta_end": 0.2}}"#).is_err());
    }
}

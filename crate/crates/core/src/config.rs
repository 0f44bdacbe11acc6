//! Flat `key=value` configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, ScdpError};
use crate::metrics::{TransparencyOrder, TransparencyParams};
use crate::observer::{EllipseConfig, ObserverConfig};
use crate::policy::{PolicyConfig, RolloutConfig, TrainConfig};
use crate::style::{EncoderConfig, PredictorConfig};
use crate::world::{DataConfig, SubsetRanking, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTrainConfig {
    pub train: TrainConfig,
    pub subset_fraction: f64,
    pub ranking: SubsetRanking,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        StyleTrainConfig {
            train: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
            subset_fraction: 0.2,
            ranking: SubsetRanking::SceneRelative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    /// First episode seed; episode `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes: 100,
            seed: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub task: Task,
    pub seed: u64,
    pub observer: ObserverConfig,
    pub ellipse: EllipseConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub clip_sample: bool,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub style: StyleTrainConfig,
    pub rollout: RolloutConfig,
    pub transparency: TransparencyParams,
    pub transparency_order: TransparencyOrder,
    pub eval: EvalSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            task: Task::BlockReach,
            seed: 0,
            observer: ObserverConfig::default(),
            ellipse: EllipseConfig::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            clip_sample: true,
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            style: StyleTrainConfig::default(),
            rollout: RolloutConfig::default(),
            transparency: TransparencyParams::default(),
            transparency_order: TransparencyOrder::Eq10,
            eval: EvalSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| ScdpError::Argument(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "observer.lambda" => self.observer.lambda = parse(key, v)?,
            "observer.tau" => self.observer.tau = parse(key, v)?,
            "observer.weight_fn" => self.observer.weight_fn = parse(key, v)?,
            "observer.warmup" => self.observer.warmup = parse(key, v)?,
            "ellipse.kappa" => self.ellipse.kappa = parse(key, v)?,
            "ellipse.eccentricity" => self.ellipse.eccentricity = parse(key, v)?,
            "data.steps" => self.data.steps = parse(key, v)?,
            "data.offset_min" => self.data.offset_min = parse(key, v)?,
            "data.offset_max" => self.data.offset_max = parse(key, v)?,
            "data.negatives" => self.data.negatives = parse(key, v)?,
            "policy.K" => self.policy.k = parse(key, v)?,
            "policy.horizon.To" => self.policy.horizons.to = parse(key, v)?,
            "policy.horizon.Tp" => self.policy.horizons.tp = parse(key, v)?,
            "policy.horizon.Ta" => self.policy.horizons.ta = parse(key, v)?,
            "policy.channels" => self.policy.channels = parse_list(key, v)?,
            "policy.kernel" => self.policy.kernel = parse(key, v)?,
            "policy.clip_sample" => self.clip_sample = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.windows_per_demo" => self.train.windows_per_demo = parse(key, v)?,
            "encoder.latent" => self.encoder.latent = parse(key, v)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, v)?,
            "encoder.batch" => self.encoder.batch = parse(key, v)?,
            "encoder.lr" => self.encoder.lr = parse(key, v)?,
            "encoder.holdout" => self.encoder.holdout = parse(key, v)?,
            "predictor.hidden" => self.predictor.hidden = parse(key, v)?,
            "predictor.layers" => self.predictor.layers = parse(key, v)?,
            "style.batch" => self.style.train.batch = parse(key, v)?,
            "style.lr" => self.style.train.lr = parse(key, v)?,
            "style.windows_per_demo" => self.style.train.windows_per_demo = parse(key, v)?,
            "style.subset_frac" => self.style.subset_fraction = parse(key, v)?,
            "style.ranking" => self.style.ranking = parse(key, v)?,
            "rollout.max_steps" => self.rollout.max_steps = parse(key, v)?,
            "rollout.goal_radius" => self.rollout.goal_radius = parse(key, v)?,
            "rollout.a_max" => self.rollout.a_max = parse(key, v)?,
            "transparency.u" => self.transparency.u = parse(key, v)?,
            "transparency.x0" => self.transparency.x0 = parse(key, v)?,
            "metrics.transparency_order" => self.transparency_order = parse(key, v)?,
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            _ => return Err(ScdpError::Argument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ScdpError::Argument(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScdpError::Argument(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Settings::default();
        s.apply_text(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.observer.validate()?;
        self.ellipse.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        self.style.train.validate()?;
        let arg = |m: &str| Err(ScdpError::Argument(m.to_string()));
        if !(self.transparency.u > 0.0) || !(self.transparency.x0 > 0.0 && self.transparency.x0 < 1.0) {
            return arg("transparency.u must be > 0 and transparency.x0 in (0, 1)");
        }
        if !(self.style.subset_fraction > 0.0 && self.style.subset_fraction <= 1.0) {
            return arg("style.subset_frac must be in (0, 1]");
        }
        if !(self.rollout.goal_radius > 0.0) || !(self.rollout.a_max > 0.0) {
            return arg("rollout.goal_radius and rollout.a_max must be positive");
        }
        if self.eval.episodes == 0 {
            return arg("eval.episodes must be ≥ 1");
        }
        if self.data.negatives == 0 || self.data.steps < 2 {
            return arg("data.negatives must be ≥ 1 and data.steps ≥ 2");
        }
        Ok(())
    }

    /// Every key with its effective value; feeding the result back through
    /// [`Settings::set`] reproduces `self`.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let h = &self.policy.horizons;
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("seed", self.seed.to_string()),
            ("observer.lambda", self.observer.lambda.to_string()),
            ("observer.tau", self.observer.tau.to_string()),
            ("observer.weight_fn", self.observer.weight_fn.to_string()),
            ("observer.warmup", self.observer.warmup.to_string()),
            ("ellipse.kappa", self.ellipse.kappa.to_string()),
            ("ellipse.eccentricity", self.ellipse.eccentricity.to_string()),
            ("data.steps", self.data.steps.to_string()),
            ("data.offset_min", self.data.offset_min.to_string()),
            ("data.offset_max", self.data.offset_max.to_string()),
            ("data.negatives", self.data.negatives.to_string()),
            ("policy.K", self.policy.k.to_string()),
            ("policy.horizon.To", h.to.to_string()),
            ("policy.horizon.Tp", h.tp.to_string()),
            ("policy.horizon.Ta", h.ta.to_string()),
            ("policy.channels", join(&self.policy.channels)),
            ("policy.kernel", self.policy.kernel.to_string()),
            ("policy.clip_sample", self.clip_sample.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.windows_per_demo", self.train.windows_per_demo.to_string()),
            ("encoder.latent", self.encoder.latent.to_string()),
            ("encoder.hidden", self.encoder.hidden.to_string()),
            ("encoder.batch", self.encoder.batch.to_string()),
            ("encoder.lr", self.encoder.lr.to_string()),
            ("encoder.holdout", self.encoder.holdout.to_string()),
            ("predictor.hidden", self.predictor.hidden.to_string()),
            ("predictor.layers", self.predictor.layers.to_string()),
            ("style.batch", self.style.train.batch.to_string()),
            ("style.lr", self.style.train.lr.to_string()),
            ("style.windows_per_demo", self.style.train.windows_per_demo.to_string()),
            ("style.subset_frac", self.style.subset_fraction.to_string()),
            ("style.ranking", self.style.ranking.to_string()),
            ("rollout.max_steps", self.rollout.max_steps.to_string()),
            ("rollout.goal_radius", self.rollout.goal_radius.to_string()),
            ("rollout.a_max", self.rollout.a_max.to_string()),
            ("transparency.u", self.transparency.u.to_string()),
            ("transparency.x0", self.transparency.x0.to_string()),
            ("metrics.transparency_order", self.transparency_order.to_string()),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_echo(echo: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = Settings::default();
        for (k, v) in echo {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }
}

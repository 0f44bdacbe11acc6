use std::path::Path;

use nncore::checkpoint::{self, AnyTensor, NamedTensors};
use nncore::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleKind};
use super::unet::{UNet, UNetConfig};
use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::rng::SimRng;
use crate::world::Demo;

pub const ARCH_TENSOR: &str = "policy.arch";
pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";
pub const NORM_BOUND: &str = "norm.bound";
pub const SCHEDULE_TENSOR: &str = "schedule.alphabar";
const NET_PREFIX: &str = "net.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizons {
    /// Observed states.
    pub to: usize,
    /// Predicted actions.
    pub tp: usize,
    /// Executed actions per replan.
    pub ta: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons { to: 2, tp: 16, ta: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub k: usize,
    pub horizons: Horizons,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub mid_blocks: usize,
    pub step_embed: usize,
    pub groups: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 100,
            horizons: Horizons::default(),
            channels: vec![64, 128, 256],
            kernel: 5,
            mid_blocks: 1,
            step_embed: 128,
            groups: 8,
        }
    }
}

impl PolicyConfig {
    pub fn obs_dim(&self) -> usize {
        2 * self.horizons.to + 2
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            action_dim: 2,
            obs_dim: self.obs_dim(),
            channels: self.channels.clone(),
            kernel: self.kernel,
            groups: self.groups,
            step_embed: self.step_embed,
            mid_blocks: self.mid_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.horizons;
        let arg = |m: &str| Err(ScdpError::Argument(m.to_string()));
        if self.k < 1 {
            return arg("policy.K must be ≥ 1");
        }
        if h.to < 1 || h.ta < 1 || h.ta > h.tp {
            return arg("horizons must satisfy To ≥ 1 and 1 ≤ Ta ≤ Tp");
        }
        if self.channels.is_empty() || self.channels.iter().any(|c| c % self.groups != 0 || *c == 0) {
            return arg("policy.channels must be non-empty multiples of the group count");
        }
        if self.kernel % 2 == 0 {
            return arg("policy.kernel must be odd");
        }
        if !self.unet().supports_horizon(h.tp) {
            return arg("Tp must be divisible by 2^(levels−1)");
        }
        if self.step_embed < 2 {
            return arg("step embedding width must be ≥ 2");
        }
        Ok(())
    }

    fn to_arch(&self) -> Vec<f64> {
        let h = &self.horizons;
        [
            self.k,
            h.to,
            h.tp,
            h.ta,
            self.kernel,
            self.mid_blocks,
            self.step_embed,
            self.groups,
        ]
        .into_iter()
        .chain(self.channels.iter().copied())
        .map(|v| v as f64)
        .collect()
    }

    fn from_arch(v: &[f64]) -> Result<Self> {
        if v.len() < 9 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(ScdpError::Data(format!("malformed {ARCH_TENSOR} tensor")));
        }
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        let cfg = PolicyConfig {
            k: u[0],
            horizons: Horizons {
                to: u[1],
                tp: u[2],
                ta: u[3],
            },
            kernel: u[4],
            mid_blocks: u[5],
            step_embed: u[6],
            groups: u[7],
            channels: u[8..].to_vec(),
        };
        cfg.validate()
            .map_err(|e| ScdpError::Data(format!("stored architecture invalid: {e}")))?;
        Ok(cfg)
    }
}

/// Per-dimension affine normalization of action deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Largest magnitude of any normalized training entry; the sampler clips
    /// its clean-signal estimate to this range.
    pub bound: f64,
}

impl ActionNorm {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity() -> Self {
        ActionNorm {
            mean: [0.0; 2],
            std: [1.0; 2],
            bound: f64::INFINITY,
        }
    }

    /// Statistics of every action entry the network is trained on, including
    /// the zero actions that pad windows past the end of a demo.
    pub fn fit(demos: &[Demo], tp: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for d in demos {
            let acts = &d.trajectory.actions;
            for t in 0..acts.len() {
                for i in 0..tp {
                    let a = acts.get(t + i).copied().unwrap_or(Vec2::ZERO);
                    for (j, v) in [a.x, a.y].into_iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(ScdpError::Data("no actions to normalize".into()));
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        let std = [0, 1].map(|j| {
            (sq[j] / n as f64 - mean[j] * mean[j])
                .max(0.0)
                .sqrt()
                .max(Self::STD_FLOOR)
        });
        let mut norm = ActionNorm { mean, std, bound: 0.0 };
        for d in demos {
            for a in d.trajectory.actions.iter().chain([&Vec2::ZERO]) {
                for v in norm.normalize(*a) {
                    norm.bound = norm.bound.max(v.abs());
                }
            }
        }
        Ok(norm)
    }

    pub fn normalize(&self, a: Vec2) -> [f64; 2] {
        [(a.x - self.mean[0]) / self.std[0], (a.y - self.mean[1]) / self.std[1]]
    }

    pub fn denormalize(&self, v: [f64; 2]) -> Vec2 {
        Vec2::new(v[0] * self.std[0] + self.mean[0], v[1] * self.std[1] + self.mean[1])
    }
}

/// Observation `[s_t, s_{t−1}, …, g*]`, positions mapped to `[−1, 1]`.
pub fn encode_observation(history: &[Vec2], t: usize, goal: Vec2, to: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * to + 2);
    for i in 0..to {
        let s = history[t.saturating_sub(i)];
        out.push((2.0 * s.x - 1.0) as f32);
        out.push((2.0 * s.y - 1.0) as f32);
    }
    out.push((2.0 * goal.x - 1.0) as f32);
    out.push((2.0 * goal.y - 1.0) as f32);
    out
}

/// One training example: observation at step `t` and the next `Tp`
/// normalized actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub demo: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f64>,
}

/// The goal-conditioned base diffusion policy.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub net: UNet<f32>,
    pub schedule: NoiseSchedule,
    pub norm: ActionNorm,
    /// Clip the clean-signal estimate to `±norm.bound` at every reverse step.
    pub clip_sample: bool,
}

impl Policy {
    pub fn new(config: PolicyConfig, norm: ActionNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.k, ScheduleKind::SquaredCosine)?;
        let mut rng = SimRng::new(seed);
        let net = UNet::new(config.unet(), &mut rng.uniform_source());
        Ok(Policy {
            config,
            net,
            schedule,
            norm,
            clip_sample: true,
        })
    }

    pub fn horizons(&self) -> Horizons {
        self.config.horizons
    }

    /// Every window of every demo (`t = 0..T−1`); actions past the end are
    /// zero, i.e. the terminal state repeats.
    pub fn windows(&self, demos: &[Demo]) -> Vec<Window> {
        let h = self.horizons();
        let mut out = Vec::new();
        for (i, d) in demos.iter().enumerate() {
            let tr = &d.trajectory;
            for t in 0..tr.actions.len() {
                let obs = encode_observation(&tr.states, t, tr.scene.goal, h.to);
                let actions = (0..h.tp)
                    .flat_map(|j| {
                        self.norm
                            .normalize(tr.actions.get(t + j).copied().unwrap_or(Vec2::ZERO))
                    })
                    .collect();
                out.push(Window { demo: i, obs, actions });
            }
        }
        out
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = vec![
            (
                ARCH_TENSOR.to_string(),
                AnyTensor::F64(Tensor::from_f64(&[self.config.to_arch().len()], &self.config.to_arch()).expect("1-d")),
            ),
            (
                NORM_MEAN.to_string(),
                AnyTensor::F64(Tensor::from_f64(&[2], &self.norm.mean).expect("1-d")),
            ),
            (
                NORM_STD.to_string(),
                AnyTensor::F64(Tensor::from_f64(&[2], &self.norm.std).expect("1-d")),
            ),
            (
                NORM_BOUND.to_string(),
                AnyTensor::F64(Tensor::from_f64(&[1], &[self.norm.bound]).expect("1-d")),
            ),
            (
                SCHEDULE_TENSOR.to_string(),
                AnyTensor::F64(
                    Tensor::from_f64(&[self.schedule.alpha_bars().len()], self.schedule.alpha_bars()).expect("1-d"),
                ),
            ),
        ];
        t.extend(checkpoint::module_tensors(&self.net, NET_PREFIX));
        t
    }

    pub fn from_tensors(tensors: &NamedTensors) -> Result<Self> {
        let vec64 =
            |name: &str| -> Result<Vec<f64>> { Ok(checkpoint::find(tensors, name)?.typed::<f64>(name)?.into_data()) };
        let config = PolicyConfig::from_arch(&vec64(ARCH_TENSOR)?)?;
        let pair = |name: &str| -> Result<[f64; 2]> {
            let v = vec64(name)?;
            <[f64; 2]>::try_from(v.as_slice()).map_err(|_| ScdpError::Data(format!("{name} must hold 2 values")))
        };
        let bound = vec64(NORM_BOUND)?;
        let norm = ActionNorm {
            mean: pair(NORM_MEAN)?,
            std: pair(NORM_STD)?,
            bound: *bound
                .first()
                .ok_or_else(|| ScdpError::Data("norm.bound is empty".into()))?,
        };
        if norm.std.iter().any(|s| !(*s > 0.0)) || !(norm.bound > 0.0) {
            return Err(ScdpError::Data("norm.std and norm.bound must be positive".into()));
        }
        let schedule = NoiseSchedule::from_alpha_bar(vec64(SCHEDULE_TENSOR)?)?;
        if schedule.steps() != config.k {
            return Err(ScdpError::Data("schedule length disagrees with policy.K".into()));
        }
        let mut zero = || 0.5;
        let mut net = UNet::new(config.unet(), &mut zero);
        checkpoint::load_module(&mut net, tensors, NET_PREFIX)?;
        Ok(Policy {
            config,
            net,
            schedule,
            norm,
            clip_sample: true,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.to_tensors())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_tensors(), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}

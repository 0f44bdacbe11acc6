use nncore::Tensor;
use serde::{Deserialize, Serialize};

use super::base::{encode_observation, Policy};
use super::unet::FilmPort;
use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::metrics;
use crate::rng::SimRng;
use crate::world::{Scene, Style, Trajectory, A_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub goal_radius: f64,
    pub a_max: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_steps: 120,
            goal_radius: 0.05,
            a_max: A_MAX,
        }
    }
}

/// Bottleneck modulation for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmRow {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Choice made at one replan.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub style: Option<Style>,
    pub film: Option<FilmRow>,
}

/// Picks the bottleneck modulation at every replan.
pub trait FilmSelector {
    fn select(&self, episode: usize, scene: &Scene, state: Vec2) -> Result<Selection>;
}

/// The unmodified base policy.
pub struct IdentitySelector;

impl FilmSelector for IdentitySelector {
    fn select(&self, _: usize, _: &Scene, _: Vec2) -> Result<Selection> {
        Ok(Selection {
            style: None,
            film: None,
        })
    }
}

/// Same modulation everywhere.
pub struct FixedSelector(pub FilmRow);

impl FilmSelector for FixedSelector {
    fn select(&self, _: usize, _: &Scene, _: Vec2) -> Result<Selection> {
        Ok(Selection {
            style: None,
            film: Some(self.0.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub success: bool,
    pub decisions: Vec<Style>,
}

impl Policy {
    /// Reverse diffusion for a batch. Row `i` draws all of its noise from
    /// `rngs[i]`, so its result does not depend on the other rows' streams.
    /// Returns raw action deltas, `Tp` per row.
    pub fn sample_actions_batch(
        &self,
        obs: &Tensor<f32>,
        rngs: &mut [SimRng],
        port: Option<&FilmPort<f32>>,
    ) -> Result<Vec<Vec<Vec2>>> {
        let b = obs.dim(0);
        if rngs.len() != b {
            return Err(ScdpError::Argument(format!(
                "{} generators for {b} observations",
                rngs.len()
            )));
        }
        let tp = self.horizons().tp;
        let row = tp * 2;
        let mut x: Vec<f64> = Vec::with_capacity(b * row);
        for r in rngs.iter_mut() {
            x.extend((0..row).map(|_| r.normal()));
        }
        for k in (1..=self.schedule.steps()).rev() {
            let xt = Tensor::from_vec(&[b, tp, 2], x.iter().map(|&v| v as f32).collect())?;
            let eps = self.net.predict(&xt, &vec![k; b], obs, port)?;
            let c = self.schedule.coefficients(k);
            let (w0, wk) = self.schedule.posterior_weights(k);
            let ab = self.schedule.alpha_bar(k);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let bound = self.norm.bound;
            for (i, r) in rngs.iter_mut().enumerate() {
                let xs = &mut x[i * row..(i + 1) * row];
                let es = &eps.data()[i * row..(i + 1) * row];
                for (xv, &e) in xs.iter_mut().zip(es) {
                    *xv = if self.clip_sample {
                        let x0 = ((*xv - sn * e as f64) / sa).clamp(-bound, bound);
                        w0 * x0 + wk * *xv
                    } else {
                        c.scale * (*xv - c.eps_coef * e as f64)
                    };
                }
                if c.sigma > 0.0 {
                    for xv in xs.iter_mut() {
                        *xv += c.sigma * r.normal();
                    }
                }
            }
        }
        Ok(x.chunks_exact(row)
            .map(|r| r.chunks_exact(2).map(|p| self.norm.denormalize([p[0], p[1]])).collect())
            .collect())
    }

    pub fn sample_actions(&self, obs: &[f32], rng: &mut SimRng, port: Option<&FilmPort<f32>>) -> Result<Vec<Vec2>> {
        let obs = Tensor::from_vec(&[1, obs.len()], obs.to_vec())?;
        let mut rngs = [rng.clone()];
        let out = self.sample_actions_batch(&obs, &mut rngs, port)?;
        *rng = rngs[0].clone();
        Ok(out.into_iter().next().expect("one row"))
    }

    /// Receding-horizon execution of many episodes at once. Episode `i`
    /// samples with its own generator seeded `seeds[i]`.
    pub fn rollout_batch(
        &self,
        scenes: &[Scene],
        seeds: &[u64],
        selector: &dyn FilmSelector,
        cfg: &RolloutConfig,
    ) -> Result<Vec<Rollout>> {
        let h = self.horizons();
        if cfg.max_steps < h.ta {
            return Err(ScdpError::Argument(format!(
                "max_steps {} smaller than the execution horizon {}",
                cfg.max_steps, h.ta
            )));
        }
        if seeds.len() != scenes.len() {
            return Err(ScdpError::Argument("one seed per scene required".into()));
        }
        let mut rngs: Vec<SimRng> = seeds.iter().map(|&s| SimRng::new(s)).collect();
        let mut states: Vec<Vec<Vec2>> = scenes.iter().map(|s| vec![s.start]).collect();
        let mut decisions: Vec<Vec<Style>> = vec![Vec::new(); scenes.len()];
        let mut done = vec![false; scenes.len()];
        let width = self.net.config().bottleneck_width();

        loop {
            for (i, scene) in scenes.iter().enumerate() {
                let s = states[i].last().unwrap();
                if s.dist(scene.goal) < cfg.goal_radius || states[i].len() > cfg.max_steps {
                    done[i] = true;
                }
            }
            let active: Vec<usize> = (0..scenes.len()).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }

            let mut obs = Vec::new();
            let mut films = Vec::with_capacity(active.len());
            for &i in &active {
                let hist = &states[i];
                obs.extend(encode_observation(hist, hist.len() - 1, scenes[i].goal, h.to));
                let sel = selector.select(i, &scenes[i], *hist.last().unwrap())?;
                if let Some(style) = sel.style {
                    decisions[i].push(style);
                }
                films.push(sel.film);
            }
            let port = if films.iter().any(Option::is_some) {
                let mut gamma = Vec::with_capacity(active.len() * width);
                let mut beta = Vec::with_capacity(active.len() * width);
                for f in &films {
                    match f {
                        Some(f) => {
                            gamma.extend_from_slice(&f.gamma);
                            beta.extend_from_slice(&f.beta);
                        }
                        None => {
                            gamma.extend(std::iter::repeat_n(1.0f32, width));
                            beta.extend(std::iter::repeat_n(0.0f32, width));
                        }
                    }
                }
                Some(FilmPort {
                    gamma: Tensor::from_vec(&[active.len(), width], gamma)?,
                    beta: Tensor::from_vec(&[active.len(), width], beta)?,
                })
            } else {
                None
            };
            let obs = Tensor::from_vec(&[active.len(), self.config.obs_dim()], obs)?;
            let mut batch_rngs: Vec<SimRng> = active.iter().map(|&i| rngs[i].clone()).collect();
            let plans = self.sample_actions_batch(&obs, &mut batch_rngs, port.as_ref())?;
            for ((&i, plan), r) in active.iter().zip(plans).zip(batch_rngs) {
                rngs[i] = r;
                let goal = scenes[i].goal;
                for a in plan.into_iter().take(h.ta) {
                    let hist = &mut states[i];
                    if hist.len() > cfg.max_steps {
                        break;
                    }
                    let next = *hist.last().unwrap() + a.clamp_norm(cfg.a_max);
                    hist.push(next);
                    if next.dist(goal) < cfg.goal_radius {
                        break;
                    }
                }
            }
        }

        Ok(scenes
            .iter()
            .zip(states)
            .zip(decisions)
            .map(|((scene, states), decisions)| {
                let trajectory = Trajectory::from_states(scene.clone(), states);
                let success = metrics::success(trajectory.final_state(), scene.goal, cfg.goal_radius);
                Rollout {
                    trajectory,
                    success,
                    decisions,
                }
            })
            .collect())
    }

    pub fn rollout(
        &self,
        scene: &Scene,
        seed: u64,
        selector: &dyn FilmSelector,
        cfg: &RolloutConfig,
    ) -> Result<Rollout> {
        Ok(self
            .rollout_batch(std::slice::from_ref(scene), &[seed], selector, cfg)?
            .pop()
            .expect("one episode"))
    }
}

use nncore::{Adam, AdamConfig, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::base::{Policy, Window};
use super::schedule::NoiseSchedule;
use super::unet::BackwardScope;
use crate::error::{Result, ScdpError};
use crate::rng::SimRng;
use crate::world::Demo;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Windows drawn per demo per epoch.
    pub windows_per_demo: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            lr: 1e-4,
            windows_per_demo: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.windows_per_demo == 0 || !(self.lr > 0.0) {
            return Err(ScdpError::Argument(
                "batch, windows_per_demo and lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A noised minibatch ready for the network.
pub struct NoisyBatch {
    pub x: Tensor<f32>,
    pub steps: Vec<usize>,
    pub obs: Tensor<f32>,
    pub eps: Vec<f32>,
    /// Index into the window list for each row.
    pub rows: Vec<usize>,
}

pub fn noisy_batch(
    windows: &[Window],
    rows: &[usize],
    schedule: &NoiseSchedule,
    tp: usize,
    rng: &mut SimRng,
) -> Result<NoisyBatch> {
    let b = rows.len();
    let obs_dim = windows[rows[0]].obs.len();
    let mut x = Vec::with_capacity(b * tp * 2);
    let mut eps = Vec::with_capacity(b * tp * 2);
    let mut obs = Vec::with_capacity(b * obs_dim);
    let mut steps = Vec::with_capacity(b);
    for &r in rows {
        let w = &windows[r];
        let k = 1 + rng.below(schedule.steps());
        let (xk, e) = schedule.forward_noise(&w.actions, k, rng);
        x.extend(xk.into_iter().map(|v| v as f32));
        eps.extend(e.into_iter().map(|v| v as f32));
        obs.extend_from_slice(&w.obs);
        steps.push(k);
    }
    Ok(NoisyBatch {
        x: Tensor::from_vec(&[b, tp, 2], x)?,
        steps,
        obs: Tensor::from_vec(&[b, obs_dim], obs)?,
        eps,
        rows: rows.to_vec(),
    })
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse_and_grad(pred: &Tensor<f32>, target: &[f32]) -> Result<(f64, Tensor<f32>)> {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&p, &t) in pred.data().iter().zip(target) {
        let d = (p - t) as f64;
        loss += d * d;
        grad.push((2.0 * d / n) as f32);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(ScdpError::Training("non-finite loss".into()));
    }
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

/// Epoch plan: `per_demo` random windows of every demo, shuffled.
pub fn epoch_rows(windows: &[Window], n_demos: usize, per_demo: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut by_demo: Vec<Vec<usize>> = vec![Vec::new(); n_demos];
    for (i, w) in windows.iter().enumerate() {
        by_demo[w.demo].push(i);
    }
    let mut rows = Vec::with_capacity(n_demos * per_demo);
    for list in by_demo.iter().filter(|l| !l.is_empty()) {
        for _ in 0..per_demo {
            rows.push(list[rng.below(list.len())]);
        }
    }
    rng.shuffle(&mut rows);
    rows
}

/// Denoising training of the whole network. Returns the mean loss per epoch.
pub fn train_base(
    policy: &mut Policy,
    demos: &[Demo],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(ScdpError::Data("training set is empty".into()));
    }
    let windows = policy.windows(demos);
    if windows.is_empty() {
        return Err(ScdpError::Data("demos contain no actions".into()));
    }
    let tp = policy.horizons().tp;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let rows = epoch_rows(&windows, demos.len(), cfg.windows_per_demo, rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in rows.chunks(cfg.batch) {
            let batch = noisy_batch(&windows, chunk, &policy.schedule, tp, rng)?;
            let (pred, cache) = policy.net.forward(&batch.x, &batch.steps, &batch.obs, None)?;
            let (loss, grad) = mse_and_grad(&pred, &batch.eps)
                .map_err(|_| ScdpError::Training(format!("non-finite loss in epoch {epoch}")))?;
            policy.net.zero_grad();
            policy.net.backward(cache, &grad, BackwardScope::Full)?;
            adam.step(&mut policy.net.params_mut())?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        curve.push(total / count as f64);
    }
    Ok(curve)
}

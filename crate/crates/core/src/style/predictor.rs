use nncore::checkpoint::{self, NamedTensors};
use nncore::layers::{silu, silu_backward};
use nncore::{Adam, AdamConfig, Linear, Mlp, Module, Param, Tensor};
use serde::{Deserialize, Serialize};

use super::encoder::SceneEncoder;
use super::sha256_hex;
use crate::error::{Result, ScdpError};
use crate::policy::train::{epoch_rows, mse_and_grad, noisy_batch};
use crate::policy::{BackwardScope, FilmPort, FilmRow, Policy, TrainConfig};
use crate::rng::SimRng;
use crate::world::{Demo, Scene, Style};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { hidden: 256, layers: 4 }
    }
}

/// MLP trunk on the scene latent with two affine heads producing the
/// bottleneck `(γ, β)`. The γ head predicts a residual around one; both
/// heads start at zero, so a fresh predictor is the identity modulation.
#[derive(Debug, Clone)]
pub struct StylePredictor {
    pub style: Style,
    pub trunk: Mlp<f32>,
    pub gamma_head: Linear<f32>,
    pub beta_head: Linear<f32>,
}

struct PredictorCache {
    trunk: nncore::layers::MlpCache<f32>,
    trunk_out: Tensor<f32>,
    gamma: nncore::layers::LinearCache<f32>,
    beta: nncore::layers::LinearCache<f32>,
}

const DIMS_TENSOR: &str = "predictor.dims";

impl StylePredictor {
    pub fn new(style: Style, latent: usize, width: usize, cfg: &PredictorConfig, rng: &mut SimRng) -> Self {
        let mut u = rng.uniform_source();
        let mut widths = vec![latent];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.layers.max(1)));
        let mut gamma_head = Linear::new("gamma_head", cfg.hidden, width, &mut u);
        let mut beta_head = Linear::new("beta_head", cfg.hidden, width, &mut u);
        gamma_head.zero_init();
        beta_head.zero_init();
        StylePredictor {
            style,
            trunk: Mlp::new("trunk", &widths, &mut u),
            gamma_head,
            beta_head,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma_head.out_features()
    }

    fn forward(&self, c: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, PredictorCache)> {
        let (z, trunk) = self.trunk.forward(c)?;
        let h = silu(&z);
        let (dg, gamma) = self.gamma_head.forward(&h)?;
        let (b, beta) = self.beta_head.forward(&h)?;
        let g = dg.map(|v| 1.0 + v);
        Ok((
            g,
            b,
            PredictorCache {
                trunk,
                trunk_out: z,
                gamma,
                beta,
            },
        ))
    }

    fn backward(&mut self, cache: PredictorCache, dgamma: &Tensor<f32>, dbeta: &Tensor<f32>) -> Result<()> {
        let mut dh = self.gamma_head.backward(cache.gamma, dgamma)?;
        dh.add_assign(&self.beta_head.backward(cache.beta, dbeta)?)?;
        let dz = silu_backward(&cache.trunk_out, &dh)?;
        self.trunk.backward(cache.trunk, &dz)?;
        Ok(())
    }

    /// `(γ, β)` for every latent row, `(B, l)` each.
    pub fn film(&self, c: &Tensor<f32>) -> Result<FilmPort<f32>> {
        let (gamma, beta, _) = self.forward(c)?;
        Ok(FilmPort { gamma, beta })
    }

    pub fn film_rows(&self, c: &Tensor<f32>) -> Result<Vec<FilmRow>> {
        let port = self.film(c)?;
        let l = self.width();
        Ok(port
            .gamma
            .data()
            .chunks_exact(l)
            .zip(port.beta.data().chunks_exact(l))
            .map(|(g, b)| FilmRow {
                gamma: g.to_vec(),
                beta: b.to_vec(),
            })
            .collect())
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let dims = [
            self.trunk.in_features(),
            self.trunk.out_features(),
            self.trunk.layers.len(),
            self.width(),
            match self.style {
                Style::Legible => 0,
                Style::Predictable => 1,
            },
        ];
        let mut t = vec![(
            DIMS_TENSOR.to_string(),
            checkpoint::to_any(Tensor::<f64>::from_f64(&[5], &dims.map(|d| d as f64)).expect("1-d")),
        )];
        t.extend(checkpoint::module_tensors(self, ""));
        t
    }

    pub fn from_tensors(tensors: &NamedTensors) -> Result<Self> {
        let d = checkpoint::find(tensors, DIMS_TENSOR)?
            .typed::<f64>(DIMS_TENSOR)?
            .into_data();
        if d.len() != 5 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) || d[4] > 1.0 {
            return Err(ScdpError::Data("malformed predictor.dims".into()));
        }
        let style = if d[4] == 0.0 {
            Style::Legible
        } else {
            Style::Predictable
        };
        let cfg = PredictorConfig {
            hidden: d[1] as usize,
            layers: d[2] as usize,
        };
        let mut p = StylePredictor::new(style, d[0] as usize, d[3] as usize, &cfg, &mut SimRng::new(0));
        checkpoint::load_module(&mut p, tensors, "")?;
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.to_tensors())?)
    }

    /// `‖γ − 1‖ + ‖β‖` averaged over the given latents.
    pub fn deviation_from_identity(&self, c: &Tensor<f32>) -> Result<f64> {
        let port = self.film(c)?;
        let l = self.width();
        let rows = c.dim(0) as f64;
        let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (g, b) in port.gamma.data().chunks_exact(l).zip(port.beta.data().chunks_exact(l)) {
            total += norm(&mut g.iter().map(|&v| v as f64 - 1.0)) + norm(&mut b.iter().map(|&v| v as f64));
        }
        Ok(total / rows)
    }
}

impl Module<f32> for StylePredictor {
    fn params(&self) -> Vec<&Param<f32>> {
        let mut p = self.trunk.params();
        p.extend(self.gamma_head.params());
        p.extend(self.beta_head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.trunk.params_mut();
        p.extend(self.gamma_head.params_mut());
        p.extend(self.beta_head.params_mut());
        p
    }
}

/// Train `predictor` with the denoising objective on `subset` while the base
/// policy and the encoder stay frozen. Gradients reach the predictor only
/// through the bottleneck port. The base and encoder serializations are
/// hashed before and after; any difference is an integrity error.
pub fn post_train_style(
    policy: &mut Policy,
    encoder: &SceneEncoder,
    predictor: &mut StylePredictor,
    subset: &[Demo],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(ScdpError::Data("style subset is empty".into()));
    }
    if predictor.width() != policy.net.config().bottleneck_width() {
        return Err(ScdpError::Argument(
            "predictor width differs from the bottleneck width".into(),
        ));
    }
    policy.net.freeze();
    let base_hash = sha256_hex(&policy.to_bytes()?);
    let encoder_hash = sha256_hex(&encoder.to_bytes()?);

    let scenes: Vec<&Scene> = subset.iter().map(|d| &d.trajectory.scene).collect();
    let latents = encoder.encode(&scenes)?;
    let s = latents.dim(1);
    let windows = policy.windows(subset);
    let tp = policy.horizons().tp;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let rows = epoch_rows(&windows, subset.len(), cfg.windows_per_demo, rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in rows.chunks(cfg.batch) {
            let batch = noisy_batch(&windows, chunk, &policy.schedule, tp, rng)?;
            let mut c = Vec::with_capacity(chunk.len() * s);
            for &r in chunk {
                let d = windows[r].demo;
                c.extend_from_slice(&latents.data()[d * s..(d + 1) * s]);
            }
            let c = Tensor::from_vec(&[chunk.len(), s], c)?;
            let (gamma, beta, pcache) = predictor.forward(&c)?;
            let port = FilmPort { gamma, beta };
            let (pred, cache) = policy.net.forward(&batch.x, &batch.steps, &batch.obs, Some(&port))?;
            let (loss, grad) = mse_and_grad(&pred, &batch.eps)
                .map_err(|_| ScdpError::Training(format!("non-finite style loss in epoch {epoch}")))?;
            let grads = policy.net.backward(cache, &grad, BackwardScope::ToBottleneck)?;
            let (dgamma, dbeta) = grads.port.expect("port was active");
            predictor.zero_grad();
            predictor.backward(pcache, &dgamma, &dbeta)?;
            adam.step(&mut predictor.params_mut())?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        curve.push(total / count as f64);
    }

    if sha256_hex(&policy.to_bytes()?) != base_hash {
        return Err(ScdpError::Integrity("base policy changed during style training".into()));
    }
    if sha256_hex(&encoder.to_bytes()?) != encoder_hash {
        return Err(ScdpError::Integrity(
            "scene encoder changed during style training".into(),
        ));
    }
    Ok(curve)
}

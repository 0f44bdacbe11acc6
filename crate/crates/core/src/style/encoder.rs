use nncore::checkpoint::{self, NamedTensors};
use nncore::{Adam, AdamConfig, Mlp, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::{check_width, enrich_scene, enriched_width};
use crate::error::{Result, ScdpError};
use crate::observer::EllipseConfig;
use crate::rng::SimRng;
use crate::world::{sample_scene, AmbiguityMode, Scene, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub latent: usize,
    pub hidden: usize,
    pub negatives: usize,
    pub batch: usize,
    pub lr: f64,
    /// Held-out share of the scenes used for the reconstruction check.
    pub holdout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent: 16,
            hidden: 128,
            negatives: 1,
            batch: 32,
            lr: 3e-4,
            holdout: 0.1,
        }
    }
}

/// Three-layer MLP encoder with a mirrored decoder used only in training.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub encoder: Mlp<f32>,
    pub decoder: Mlp<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderReport {
    pub loss_curve: Vec<f64>,
    /// Root-mean-square reconstruction error on held-out scenes; `None`
    /// when nothing was trained.
    pub heldout_rmse: Option<f64>,
}

const ENC_PREFIX: &str = "encoder.";
const DEC_PREFIX: &str = "decoder.";
const DIMS_TENSOR: &str = "encoder.dims";

impl SceneEncoder {
    pub fn new(input: usize, cfg: &EncoderConfig, rng: &mut SimRng) -> Self {
        let mut u = rng.uniform_source();
        SceneEncoder {
            encoder: Mlp::new("enc", &[input, cfg.hidden, cfg.hidden, cfg.latent], &mut u),
            decoder: Mlp::new("dec", &[cfg.latent, cfg.hidden, cfg.hidden, input], &mut u),
        }
    }

    pub fn input_width(&self) -> usize {
        self.encoder.in_features()
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.out_features()
    }

    fn batch_tensor(&self, scenes: &[&Scene]) -> Result<Tensor<f32>> {
        let w = self.input_width();
        let mut data = Vec::with_capacity(scenes.len() * w);
        for s in scenes {
            check_width(s, w)?;
            data.extend(enrich_scene(s).into_iter().map(|v| v as f32));
        }
        Ok(Tensor::from_vec(&[scenes.len(), w], data)?)
    }

    /// Latent `c` for each scene, `(B, s)`.
    pub fn encode(&self, scenes: &[&Scene]) -> Result<Tensor<f32>> {
        Ok(self.encoder.forward(&self.batch_tensor(scenes)?)?.0)
    }

    pub fn reconstruction_rmse(&self, scenes: &[&Scene]) -> Result<f64> {
        let x = self.batch_tensor(scenes)?;
        let (c, _) = self.encoder.forward(&x)?;
        let (y, _) = self.decoder.forward(&c)?;
        let sq: f64 = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok((sq / x.len() as f64).sqrt())
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let dims = [
            self.input_width(),
            self.encoder.layers[0].out_features(),
            self.latent_width(),
        ];
        let mut t = vec![(
            DIMS_TENSOR.to_string(),
            checkpoint::to_any(Tensor::<f64>::from_f64(&[3], &dims.map(|d| d as f64)).expect("1-d")),
        )];
        t.extend(checkpoint::module_tensors(&self.encoder, ENC_PREFIX));
        t.extend(checkpoint::module_tensors(&self.decoder, DEC_PREFIX));
        t
    }

    pub fn from_tensors(tensors: &NamedTensors) -> Result<Self> {
        let dims = checkpoint::find(tensors, DIMS_TENSOR)?
            .typed::<f64>(DIMS_TENSOR)?
            .into_data();
        if dims.len() != 3 || dims.iter().any(|d| d.fract() != 0.0 || *d < 1.0) {
            return Err(ScdpError::Data("malformed encoder.dims".into()));
        }
        let cfg = EncoderConfig {
            hidden: dims[1] as usize,
            latent: dims[2] as usize,
            ..Default::default()
        };
        let mut s = SceneEncoder::new(dims[0] as usize, &cfg, &mut SimRng::new(0));
        checkpoint::load_module(&mut s.encoder, tensors, ENC_PREFIX)?;
        checkpoint::load_module(&mut s.decoder, tensors, DEC_PREFIX)?;
        Ok(s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.to_tensors())?)
    }
}

/// Autoencoder pre-training on `n_scenes` random goal configurations. The
/// last `holdout` share of the scenes is never trained on.
pub fn train_encoder(
    task: Task,
    n_scenes: usize,
    epochs: usize,
    cfg: &EncoderConfig,
    ellipse: &EllipseConfig,
    seed: u64,
) -> Result<(SceneEncoder, EncoderReport)> {
    if n_scenes == 0 {
        return Err(ScdpError::Argument("n_scenes must be ≥ 1".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(ScdpError::Argument("encoder batch, lr and holdout out of range".into()));
    }
    let mut rng = SimRng::new(seed);
    let scenes: Vec<Scene> = (0..n_scenes)
        .map(|_| sample_scene(task, &mut rng, AmbiguityMode::Any, cfg.negatives, ellipse))
        .collect::<Result<_>>()?;
    let mut model = SceneEncoder::new(enriched_width(cfg.negatives), cfg, &mut rng);
    if epochs == 0 {
        return Ok((
            model,
            EncoderReport {
                loss_curve: Vec::new(),
                heldout_rmse: None,
            },
        ));
    }
    let n_test = ((n_scenes as f64 * cfg.holdout).round() as usize).min(n_scenes - 1);
    let (train, test) = scenes.split_at(n_scenes - n_test);

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train[i]).collect();
            let x = model.batch_tensor(&batch)?;
            let (c, ec) = model.encoder.forward(&x)?;
            let (y, dc) = model.decoder.forward(&c)?;
            let n = x.len() as f64;
            let mut loss = 0.0;
            let grad: Vec<f32> = y
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    loss += d * d;
                    (2.0 * d / n) as f32
                })
                .collect();
            let loss = loss / n;
            if !loss.is_finite() {
                return Err(ScdpError::Training(format!("non-finite encoder loss in epoch {epoch}")));
            }
            model.encoder.zero_grad();
            model.decoder.zero_grad();
            let dlatent = model.decoder.backward(dc, &Tensor::from_vec(y.shape(), grad)?)?;
            model.encoder.backward(ec, &dlatent)?;
            let mut params = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            adam.step(&mut params)?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        curve.push(total / count as f64);
    }
    let heldout = if test.is_empty() { train } else { test };
    let refs: Vec<&Scene> = heldout.iter().collect();
    let rmse = model.reconstruction_rmse(&refs)?;
    Ok((
        model,
        EncoderReport {
            loss_curve: curve,
            heldout_rmse: Some(rmse),
        },
    ))
}

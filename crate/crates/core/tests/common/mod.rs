//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nncore::{GradCheckable, Module, Tensor};
use scdp::policy::{BackwardScope, FilmPort, UNet, UNetConfig};
use scdp::SimRng;

/// `L = Σ r ⊙ ε̂` for a fixed random `r`, checked against finite differences
/// for every weight, the port, the observation and the noisy input.
pub struct UNetProbe {
    pub net: UNet<f64>,
    pub x: Tensor<f64>,
    pub obs: Tensor<f64>,
    pub steps: Vec<usize>,
    pub port: FilmPort<f64>,
    pub r: Tensor<f64>,
}

impl UNetProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = SimRng::new(seed);
        let config = UNetConfig {
            action_dim: 2,
            obs_dim: 6,
            channels: vec![4, 8],
            kernel: 3,
            groups: 2,
            step_embed: 4,
            mid_blocks: 1,
        };
        let net = UNet::new(config, &mut rng.uniform_source());
        let mut t = |shape: &[usize], scale: f64, offset: f64| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| offset + scale * rng.normal()).collect()).unwrap()
        };
        UNetProbe {
            x: t(&[2, 4, 2], 1.0, 0.0),
            obs: t(&[2, 6], 0.5, 0.0),
            port: FilmPort {
                gamma: t(&[2, 8], 0.3, 1.0),
                beta: t(&[2, 8], 0.3, 0.0),
            },
            r: t(&[2, 4, 2], 1.0, 0.0),
            steps: vec![3, 17],
            net,
        }
    }

    fn output_loss(&self, y: &Tensor<f64>) -> f64 {
        y.data().iter().zip(self.r.data()).map(|(a, b)| a * b).sum()
    }
}

impl GradCheckable for UNetProbe {
    fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.net.params().iter().map(|p| p.name.clone()).collect();
        n.extend(["port.gamma", "port.beta", "obs", "input"].map(String::from));
        n
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        match name {
            "port.gamma" => &mut self.port.gamma,
            "port.beta" => &mut self.port.beta,
            "obs" => &mut self.obs,
            "input" => &mut self.x,
            _ => {
                &mut self
                    .net
                    .params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .expect("known parameter")
                    .value
            }
        }
    }

    fn loss(&mut self) -> f64 {
        let y = self
            .net
            .predict(&self.x, &self.steps, &self.obs, Some(&self.port))
            .unwrap();
        self.output_loss(&y)
    }

    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        let (y, cache) = self
            .net
            .forward(&self.x, &self.steps, &self.obs, Some(&self.port))
            .unwrap();
        let loss = self.output_loss(&y);
        self.net.zero_grad();
        let g = self.net.backward(cache, &self.r, BackwardScope::Full).unwrap();
        let mut grads: Vec<Tensor<f64>> = self.net.params().iter().map(|p| p.grad.clone()).collect();
        let (dg, db) = g.port.unwrap();
        grads.extend([dg, db, g.obs.unwrap(), g.input.unwrap()]);
        (loss, grads)
    }
}

pub fn scdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scdp"))
        .args(args)
        .output()
        .expect("run scdp")
}

/// Run and require exit code 0; returns stderr.
pub fn scdp_ok(args: &[&str]) -> String {
    let out = scdp(args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "scdp {args:?} failed: {err}");
    err
}

/// Every file a pipeline run leaves behind.
pub struct PipelineRun {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub base: PathBuf,
    pub encoder: PathBuf,
    pub bundle: PathBuf,
    pub eval: PathBuf,
    /// stderr of `train-encoder`.
    pub encoder_log: String,
    /// SHA-256 of `base.ckpt` right after `train-base`.
    pub base_sha_after_training: String,
}

pub struct PipelineSizes {
    pub demos: usize,
    pub base_epochs: usize,
    pub scenes: usize,
    pub encoder_epochs: usize,
    pub style_epochs: usize,
    pub episodes: usize,
}

/// gen-data, train-base, train-encoder, train-style for both styles, eval.
pub fn run_pipeline(dir: &Path, config: Option<&Path>, sizes: &PipelineSizes) -> PipelineRun {
    std::fs::create_dir_all(dir).unwrap();
    let p = |name: &str| dir.join(name);
    let s = |path: &Path| path.to_str().unwrap().to_string();
    let mut global: Vec<String> = vec!["--seed".into(), "0".into()];
    if let Some(c) = config {
        global.extend(["--config".into(), s(c)]);
    }
    let run = |args: Vec<String>| {
        let mut all = args;
        all.extend(global.iter().cloned());
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        scdp_ok(&refs)
    };
    let v = |items: &[&str]| items.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let (dataset, base, encoder, bundle, eval) = (
        p("dataset.jsonl"),
        p("base.ckpt"),
        p("encoder.ckpt"),
        p("bundle"),
        p("eval"),
    );
    run([
        v(&["gen-data", "--n", &sizes.demos.to_string(), "--out"]),
        vec![s(&dataset)],
    ]
    .concat());
    run([
        v(&["train-base", "--epochs", &sizes.base_epochs.to_string(), "--data"]),
        vec![s(&dataset), "--out".into(), s(&base)],
    ]
    .concat());
    let base_sha = scdp::style::sha256_hex(&std::fs::read(&base).unwrap());
    let encoder_log = run([
        v(&[
            "train-encoder",
            "--scenes",
            &sizes.scenes.to_string(),
            "--epochs",
            &sizes.encoder_epochs.to_string(),
            "--out",
        ]),
        vec![s(&encoder)],
    ]
    .concat());
    run([
        v(&[
            "train-style",
            "--style",
            "legible",
            "--epochs",
            &sizes.style_epochs.to_string(),
            "--bundle",
        ]),
        vec![
            s(&bundle),
            "--base".into(),
            s(&base),
            "--encoder".into(),
            s(&encoder),
            "--data".into(),
            s(&dataset),
        ],
    ]
    .concat());
    run([
        v(&[
            "train-style",
            "--style",
            "predictable",
            "--epochs",
            &sizes.style_epochs.to_string(),
            "--bundle",
        ]),
        vec![s(&bundle)],
    ]
    .concat());
    run([
        v(&["eval", "--episodes", &sizes.episodes.to_string(), "--bundle"]),
        vec![s(&bundle), "--out-dir".into(), s(&eval)],
    ]
    .concat());
    PipelineRun {
        dir: dir.to_path_buf(),
        dataset,
        base,
        encoder,
        bundle,
        eval,
        encoder_log,
        base_sha_after_training: base_sha,
    }
}

/// A network small enough for quick end-to-end runs.
pub const TINY_CONFIG: &str = "\
policy.K = 5
policy.horizon.Tp = 4
policy.horizon.Ta = 2
policy.channels = 8,16
encoder.latent = 4
encoder.hidden = 16
predictor.hidden = 16
predictor.layers = 2
rollout.max_steps = 20
";

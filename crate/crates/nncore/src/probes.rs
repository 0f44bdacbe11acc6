//! Gradient-check fixtures for each layer.
//!
//! Every probe wraps one layer plus a fixed input and a fixed projection `r`;
//! the checked loss is `Σ r ⊙ layer(input)`, so `dL/dy = r`. All probes are
//! `f64` and draw their contents from a caller-supplied `[0, 1)` source.

use crate::gradcheck::GradCheckable;
use crate::layers::{self, Conv1d, GroupNorm, Linear, Mlp};
use crate::{Module, Tensor};

fn random(shape: &[usize], uniform: &mut impl FnMut() -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| 2.0 * uniform() - 1.0).collect()).unwrap()
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn pick(uniform: &mut impl FnMut() -> f64, lo: usize, hi: usize) -> usize {
    lo + ((uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

/// Shared bookkeeping for a probe whose only non-parameter input is `x`.
fn param_tensor_mut<'a>(params: Vec<&'a mut crate::Param<f64>>, name: &str) -> &'a mut Tensor<f64> {
    params
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| &mut p.value)
        .unwrap_or_else(|| panic!("unknown tensor `{name}`"))
}

fn param_grads(params: Vec<&crate::Param<f64>>) -> Vec<Tensor<f64>> {
    params.into_iter().map(|p| p.grad.clone()).collect()
}

// ---------------------------------------------------------------------------

pub struct LinearProbe {
    pub layer: Linear<f64>,
    pub x: Tensor<f64>,
    r: Tensor<f64>,
}

impl LinearProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let (rows, input, output) = (pick(uniform, 1, 4), pick(uniform, 1, 6), pick(uniform, 1, 6));
        let layer = Linear::new("lin", input, output, uniform);
        LinearProbe {
            layer,
            x: random(&[rows, input], uniform),
            r: random(&[rows, output], uniform),
        }
    }
}

impl GradCheckable for LinearProbe {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["x".to_string()];
        n.extend(self.layer.params().iter().map(|p| p.name.clone()));
        n
    }
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        if name == "x" {
            return &mut self.x;
        }
        param_tensor_mut(self.layer.params_mut(), name)
    }
    fn loss(&mut self) -> f64 {
        project(&self.layer.forward(&self.x).unwrap().0, &self.r)
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        self.layer.zero_grad();
        let (y, cache) = self.layer.forward(&self.x).unwrap();
        let dx = self.layer.backward(cache, &self.r).unwrap();
        let mut g = vec![dx];
        g.extend(param_grads(self.layer.params()));
        (project(&y, &self.r), g)
    }
}

// ---------------------------------------------------------------------------

pub struct Conv1dProbe {
    pub layer: Conv1d<f64>,
    pub x: Tensor<f64>,
    r: Tensor<f64>,
}

impl Conv1dProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let batch = pick(uniform, 1, 3);
        let (c_in, c_out) = (pick(uniform, 1, 4), pick(uniform, 1, 4));
        let kernel = 2 * pick(uniform, 0, 2) + 1;
        let stride = pick(uniform, 1, 2);
        let t = pick(uniform, 2, 9);
        let layer = Conv1d::new("conv", c_in, c_out, kernel, stride, uniform);
        let t_out = layer.out_len(t);
        Conv1dProbe {
            x: random(&[batch, c_in, t], uniform),
            r: random(&[batch, c_out, t_out], uniform),
            layer,
        }
    }
}

impl GradCheckable for Conv1dProbe {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["x".to_string()];
        n.extend(self.layer.params().iter().map(|p| p.name.clone()));
        n
    }
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        if name == "x" {
            return &mut self.x;
        }
        param_tensor_mut(self.layer.params_mut(), name)
    }
    fn loss(&mut self) -> f64 {
        project(&self.layer.forward(&self.x).unwrap().0, &self.r)
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        self.layer.zero_grad();
        let (y, cache) = self.layer.forward(&self.x).unwrap();
        let dx = self.layer.backward(cache, &self.r).unwrap();
        let mut g = vec![dx];
        g.extend(param_grads(self.layer.params()));
        (project(&y, &self.r), g)
    }
}

// ---------------------------------------------------------------------------

pub struct GroupNormProbe {
    pub layer: GroupNorm<f64>,
    pub x: Tensor<f64>,
    r: Tensor<f64>,
}

impl GroupNormProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let batch = pick(uniform, 1, 3);
        let groups = pick(uniform, 1, 3);
        let channels = groups * pick(uniform, 1, 3);
        let t = pick(uniform, 2, 6);
        let mut layer = GroupNorm::new("gn", groups, channels);
        // perturb the affine part away from (1, 0)
        layer.weight.value = random(&[channels], uniform).map(|v| 1.0 + 0.5 * v);
        layer.bias.value = random(&[channels], uniform);
        GroupNormProbe {
            layer,
            x: random(&[batch, channels, t], uniform),
            r: random(&[batch, channels, t], uniform),
        }
    }
}

impl GradCheckable for GroupNormProbe {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["x".to_string()];
        n.extend(self.layer.params().iter().map(|p| p.name.clone()));
        n
    }
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        if name == "x" {
            return &mut self.x;
        }
        param_tensor_mut(self.layer.params_mut(), name)
    }
    fn loss(&mut self) -> f64 {
        project(&self.layer.forward(&self.x).unwrap().0, &self.r)
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        self.layer.zero_grad();
        let (y, cache) = self.layer.forward(&self.x).unwrap();
        let dx = self.layer.backward(cache, &self.r).unwrap();
        let mut g = vec![dx];
        g.extend(param_grads(self.layer.params()));
        (project(&y, &self.r), g)
    }
}

// ---------------------------------------------------------------------------

/// SiLU followed by nearest ×2 upsampling (the two parameter-free ops).
pub struct ActivationProbe {
    pub x: Tensor<f64>,
    r: Tensor<f64>,
}

impl ActivationProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let (b, c, t) = (pick(uniform, 1, 3), pick(uniform, 1, 3), pick(uniform, 1, 5));
        ActivationProbe {
            x: random(&[b, c, t], uniform).map(|v| 3.0 * v),
            r: random(&[b, c, 2 * t], uniform),
        }
    }

    fn forward(&self) -> Tensor<f64> {
        layers::upsample2(&layers::silu(&self.x)).unwrap()
    }
}

impl GradCheckable for ActivationProbe {
    fn names(&self) -> Vec<String> {
        vec!["x".into()]
    }
    fn tensor_mut(&mut self, _: &str) -> &mut Tensor<f64> {
        &mut self.x
    }
    fn loss(&mut self) -> f64 {
        project(&self.forward(), &self.r)
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        let y = self.forward();
        let d = layers::upsample2_backward(&self.r).unwrap();
        let dx = layers::silu_backward(&self.x, &d).unwrap();
        (project(&y, &self.r), vec![dx])
    }
}

// ---------------------------------------------------------------------------

/// FiLM junction `γ ⊙ h + β` with per-sample or shared modulation.
pub struct FilmProbe {
    pub h: Tensor<f64>,
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
    r: Tensor<f64>,
}

impl FilmProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let (b, c, t) = (pick(uniform, 1, 3), pick(uniform, 1, 5), pick(uniform, 1, 4));
        let mod_shape = if uniform() < 0.5 { vec![c] } else { vec![b, c] };
        FilmProbe {
            h: random(&[b, c, t], uniform),
            gamma: random(&mod_shape, uniform),
            beta: random(&mod_shape, uniform),
            r: random(&[b, c, t], uniform),
        }
    }
}

impl GradCheckable for FilmProbe {
    fn names(&self) -> Vec<String> {
        vec!["h".into(), "gamma".into(), "beta".into()]
    }
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        match name {
            "h" => &mut self.h,
            "gamma" => &mut self.gamma,
            "beta" => &mut self.beta,
            _ => panic!("unknown tensor `{name}`"),
        }
    }
    fn loss(&mut self) -> f64 {
        project(
            &layers::film_modulate(&self.h, &self.gamma, &self.beta).unwrap(),
            &self.r,
        )
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        let y = layers::film_modulate(&self.h, &self.gamma, &self.beta).unwrap();
        let (dh, dg, db) = layers::film_backward(&self.h, &self.gamma, &self.beta, &self.r).unwrap();
        (project(&y, &self.r), vec![dh, dg, db])
    }
}

// ---------------------------------------------------------------------------

pub struct MlpProbe {
    pub mlp: Mlp<f64>,
    pub x: Tensor<f64>,
    r: Tensor<f64>,
}

impl MlpProbe {
    pub fn random(uniform: &mut impl FnMut() -> f64) -> Self {
        let depth = pick(uniform, 2, 4);
        let widths: Vec<usize> = (0..depth).map(|_| pick(uniform, 1, 5)).collect();
        let rows = pick(uniform, 1, 3);
        let mlp = Mlp::new("mlp", &widths, uniform);
        MlpProbe {
            x: random(&[rows, widths[0]], uniform),
            r: random(&[rows, *widths.last().unwrap()], uniform),
            mlp,
        }
    }
}

impl GradCheckable for MlpProbe {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["x".to_string()];
        n.extend(self.mlp.params().iter().map(|p| p.name.clone()));
        n
    }
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64> {
        if name == "x" {
            return &mut self.x;
        }
        param_tensor_mut(self.mlp.params_mut(), name)
    }
    fn loss(&mut self) -> f64 {
        project(&self.mlp.forward(&self.x).unwrap().0, &self.r)
    }
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>) {
        self.mlp.zero_grad();
        let (y, cache) = self.mlp.forward(&self.x).unwrap();
        let dx = self.mlp.backward(cache, &self.r).unwrap();
        let mut g = vec![dx];
        g.extend(param_grads(self.mlp.params()));
        (project(&y, &self.r), g)
    }
}

//! Fixed layer set with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward` is pure (`&self`) and
//! returns the output together with whatever the backward pass needs;
//! `backward` consumes that cache, accumulates parameter gradients (unless
//! the parameter is frozen) and returns the gradient with respect to the
//! input.

use crate::{Module, NnError, Param, Real, Result, Tensor};

/// Uniform in `[-bound, bound)` from a `[0, 1)` source.
fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, uniform: &mut impl FnMut() -> f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy((2.0 * uniform() - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

// ---------------------------------------------------------------------------
// Affine

/// Dense affine map `y = W x + b`, `W` stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct LinearCache<T> {
    input: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// PyTorch-style init: both tensors uniform in `±1/sqrt(in)`.
    pub fn new(name: &str, input: usize, output: usize, uniform: &mut impl FnMut() -> f64) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_tensor(&[output, input], bound, uniform),
            ),
            bias: Param::new(format!("{name}.bias"), uniform_tensor(&[output], bound, uniform)),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(NnError::dim("linear", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    /// Zero both weight and bias (used for residual heads).
    pub fn zero_init(&mut self) {
        self.weight.value.fill(T::zero());
        self.bias.value.fill(T::zero());
    }

    /// Applies the map to every row of `x` (last axis = features).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let (input, output) = (self.in_features(), self.out_features());
        if x.ndim() == 0 || *x.shape().last().unwrap() != input {
            return Err(NnError::dim("affine_forward", x.shape(), self.weight.value.shape()));
        }
        let rows = x.len() / input;
        let mut y = Vec::with_capacity(rows * output);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.value.data());
        }
        T::gemm(
            rows,
            input,
            output,
            x.data(),
            (input, 1),
            self.weight.value.data(),
            (1, input),
            T::one(),
            &mut y,
            (output, 1),
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = output;
        Ok((Tensor::from_vec(&shape, y)?, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: LinearCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (input, output) = (self.in_features(), self.out_features());
        let x = cache.input;
        let rows = x.len() / input;
        if dy.len() != rows * output {
            return Err(NnError::dim("affine_backward", dy.shape(), &[rows, output]));
        }
        if !self.weight.frozen {
            T::gemm(
                output,
                rows,
                input,
                dy.data(),
                (1, output),
                x.data(),
                (input, 1),
                T::one(),
                self.weight.grad.data_mut(),
                (input, 1),
            );
        }
        if !self.bias.frozen {
            let gb = self.bias.grad.data_mut();
            for row in dy.data().chunks_exact(output) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * input];
        T::gemm(
            rows,
            output,
            input,
            dy.data(),
            (output, 1),
            self.weight.value.data(),
            (input, 1),
            T::zero(),
            &mut dx,
            (input, 1),
        );
        Tensor::from_vec(x.shape(), dx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// 1D convolution

/// 1D convolution over `(batch, channels, time)` with zero "same" padding
/// (`kernel / 2` on each side). Weight layout `[out, in, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

#[derive(Debug)]
pub struct Conv1dCache<T> {
    cols: Vec<T>,
    batch: usize,
    t_in: usize,
    t_out: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        uniform: &mut impl FnMut() -> f64,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        assert!(stride >= 1);
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Conv1d {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_tensor(&[c_out, c_in, kernel], bound, uniform),
            ),
            bias: Param::new(format!("{name}.bias"), uniform_tensor(&[c_out], bound, uniform)),
            stride,
        }
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        if weight.ndim() != 3 || weight.dim(2) % 2 == 0 || bias.shape() != [weight.dim(0)] {
            return Err(NnError::dim("conv1d", weight.shape(), bias.shape()));
        }
        Ok(Conv1d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            stride,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.dim(1)
    }
    pub fn c_out(&self) -> usize {
        self.weight.value.dim(0)
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        let pad = self.kernel() / 2;
        (t_in + 2 * pad - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv1dCache<T>)> {
        let (c_in, c_out, k) = (self.c_in(), self.c_out(), self.kernel());
        if x.ndim() != 3 || x.dim(1) != c_in {
            return Err(NnError::dim("conv1d_forward", x.shape(), self.weight.value.shape()));
        }
        let (batch, t_in) = (x.dim(0), x.dim(2));
        let t_out = self.out_len(t_in);
        let pad = k / 2;
        let width = c_in * k;
        let rows = batch * t_out;

        // im2col: row (b, t) holds the receptive field of output position t
        let mut cols = vec![T::zero(); rows * width];
        let xd = x.data();
        for b in 0..batch {
            for t in 0..t_out {
                let row = &mut cols[(b * t_out + t) * width..(b * t_out + t + 1) * width];
                let start = (t * self.stride) as isize - pad as isize;
                for ci in 0..c_in {
                    let src = &xd[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                    for j in 0..k {
                        let pos = start + j as isize;
                        if pos >= 0 && (pos as usize) < t_in {
                            row[ci * k + j] = src[pos as usize];
                        }
                    }
                }
            }
        }

        let mut ymat = vec![T::zero(); rows * c_out];
        T::gemm(
            rows,
            width,
            c_out,
            &cols,
            (width, 1),
            self.weight.value.data(),
            (1, width),
            T::zero(),
            &mut ymat,
            (c_out, 1),
        );

        let bias = self.bias.value.data();
        let mut y = vec![T::zero(); batch * c_out * t_out];
        for b in 0..batch {
            for co in 0..c_out {
                let dst = &mut y[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = ymat[(b * t_out + t) * c_out + co] + bias[co];
                }
            }
        }
        Ok((
            Tensor::from_vec(&[batch, c_out, t_out], y)?,
            Conv1dCache {
                cols,
                batch,
                t_in,
                t_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: Conv1dCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_in, c_out, k) = (self.c_in(), self.c_out(), self.kernel());
        let Conv1dCache {
            cols,
            batch,
            t_in,
            t_out,
        } = cache;
        if dy.shape() != [batch, c_out, t_out] {
            return Err(NnError::dim("conv1d_backward", dy.shape(), &[batch, c_out, t_out]));
        }
        let width = c_in * k;
        let rows = batch * t_out;
        let dyd = dy.data();

        let mut dymat = vec![T::zero(); rows * c_out];
        for b in 0..batch {
            for co in 0..c_out {
                let src = &dyd[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for (t, &v) in src.iter().enumerate() {
                    dymat[(b * t_out + t) * c_out + co] = v;
                }
            }
        }

        if !self.weight.frozen {
            T::gemm(
                c_out,
                rows,
                width,
                &dymat,
                (1, c_out),
                &cols,
                (width, 1),
                T::one(),
                self.weight.grad.data_mut(),
                (width, 1),
            );
        }
        if !self.bias.frozen {
            let gb = self.bias.grad.data_mut();
            for row in dymat.chunks_exact(c_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
        }

        let mut dcols = cols;
        T::gemm(
            rows,
            c_out,
            width,
            &dymat,
            (c_out, 1),
            self.weight.value.data(),
            (width, 1),
            T::zero(),
            &mut dcols,
            (width, 1),
        );

        // col2im
        let pad = k / 2;
        let mut dx = vec![T::zero(); batch * c_in * t_in];
        for b in 0..batch {
            for t in 0..t_out {
                let row = &dcols[(b * t_out + t) * width..(b * t_out + t + 1) * width];
                let start = (t * self.stride) as isize - pad as isize;
                for ci in 0..c_in {
                    let dst = &mut dx[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                    for j in 0..k {
                        let pos = start + j as isize;
                        if pos >= 0 && (pos as usize) < t_in {
                            dst[pos as usize] = dst[pos as usize] + row[ci * k + j];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[batch, c_in, t_in], dx)
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Group normalization

#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug)]
pub struct GroupNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            weight: Param::new(format!("{name}.weight"), Tensor::full(&[channels], T::one())),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GroupNormCache<T>)> {
        let c = self.channels();
        if x.ndim() != 3 || x.dim(1) != c {
            return Err(NnError::dim("group_norm", x.shape(), &[c]));
        }
        let (batch, t) = (x.dim(0), x.dim(2));
        let per = c / self.groups;
        let n = per * t;
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(self.eps);
        let (w, bias) = (self.weight.value.data(), self.bias.value.data());

        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(batch * self.groups);
        for b in 0..batch {
            for g in 0..self.groups {
                let off = (b * c + g * per) * t;
                let src = &x.data()[off..off + n];
                let mean = src.iter().copied().sum::<T>() / nf;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for (i, &v) in src.iter().enumerate() {
                    let ch = g * per + i / t;
                    let h = (v - mean) * inv;
                    xhat[off + i] = h;
                    y[off + i] = h * w[ch] + bias[ch];
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            GroupNormCache {
                xhat,
                inv_std,
                shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn backward(&mut self, cache: GroupNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != cache.shape.as_slice() {
            return Err(NnError::dim("group_norm_backward", dy.shape(), &cache.shape));
        }
        let c = self.channels();
        let (batch, t) = (cache.shape[0], cache.shape[2]);
        let per = c / self.groups;
        let n = per * t;
        let nf = T::from_usize(n).unwrap();
        let dyd = dy.data();
        let track_w = !self.weight.frozen;
        let track_b = !self.bias.frozen;

        let mut dx = vec![T::zero(); dy.len()];
        for b in 0..batch {
            for g in 0..self.groups {
                let off = (b * c + g * per) * t;
                let inv = cache.inv_std[b * self.groups + g];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for i in 0..n {
                    let ch = g * per + i / t;
                    let d = dyd[off + i];
                    let h = cache.xhat[off + i];
                    let dh = d * self.weight.value.data()[ch];
                    sum_d = sum_d + dh;
                    sum_dx = sum_dx + dh * h;
                    if track_w {
                        let gw = &mut self.weight.grad.data_mut()[ch];
                        *gw = *gw + d * h;
                    }
                    if track_b {
                        let gb = &mut self.bias.grad.data_mut()[ch];
                        *gb = *gb + d;
                    }
                }
                for i in 0..n {
                    let ch = g * per + i / t;
                    let dh = dyd[off + i] * self.weight.value.data()[ch];
                    let h = cache.xhat[off + i];
                    dx[off + i] = inv / nf * (nf * dh - sum_d - h * sum_dx);
                }
            }
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Parameter-free ops

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`. The input doubles as the cache.
pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(NnError::dim("silu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Nearest-neighbour ×2 upsampling along the time axis of `(B, C, T)`.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(NnError::dim("upsample2", x.shape(), &[0, 0, 0]));
    }
    let data = x.data().iter().flat_map(|&v| [v, v]).collect();
    Tensor::from_vec(&[x.dim(0), x.dim(1), 2 * x.dim(2)], data)
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.ndim() != 3 || dy.dim(2) % 2 != 0 {
        return Err(NnError::dim("upsample2_backward", dy.shape(), &[0, 0, 0]));
    }
    let data = dy.data().chunks_exact(2).map(|p| p[0] + p[1]).collect();
    Tensor::from_vec(&[dy.dim(0), dy.dim(1), dy.dim(2) / 2], data)
}

// ---------------------------------------------------------------------------
// FiLM

/// Resolved broadcast layout for FiLM: `h` viewed as `(batch, channels, rest)`.
struct FilmLayout {
    batch: usize,
    channels: usize,
    rest: usize,
    per_sample: bool,
}

fn film_layout<T: Real>(h: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<FilmLayout> {
    let shape = h.shape();
    let (batch, channels, rest) = match shape.len() {
        0 => return Err(NnError::dim("film_modulate", shape, gamma.shape())),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    };
    if gamma.shape() != beta.shape() {
        return Err(NnError::dim("film_modulate", gamma.shape(), beta.shape()));
    }
    let per_sample = match gamma.shape() {
        [c] if *c == channels => false,
        [b, c] if *b == batch && *c == channels && shape.len() > 1 => true,
        _ => return Err(NnError::dim("film_modulate", shape, gamma.shape())),
    };
    Ok(FilmLayout {
        batch,
        channels,
        rest,
        per_sample,
    })
}

/// Feature-wise linear modulation `γ ⊙ h + β`, broadcast over every axis of
/// `h` except the channel axis (axis 1, or axis 0 for a vector).
///
/// `gamma`/`beta` are either `(C)` (shared) or `(B, C)` (per sample).
pub fn film_modulate<T: Real>(h: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let l = film_layout(h, gamma, beta)?;
    let mut out = vec![T::zero(); h.len()];
    for b in 0..l.batch {
        for c in 0..l.channels {
            let idx = if l.per_sample { b * l.channels + c } else { c };
            let (g, be) = (gamma.data()[idx], beta.data()[idx]);
            let off = (b * l.channels + c) * l.rest;
            for i in off..off + l.rest {
                out[i] = g * h.data()[i] + be;
            }
        }
    }
    Tensor::from_vec(h.shape(), out)
}

/// Gradients of [`film_modulate`] with respect to `(h, gamma, beta)`.
pub fn film_backward<T: Real>(
    h: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let l = film_layout(h, gamma, beta)?;
    if dy.shape() != h.shape() {
        return Err(NnError::dim("film_backward", dy.shape(), h.shape()));
    }
    let mut dh = vec![T::zero(); h.len()];
    let mut dg = vec![T::zero(); gamma.len()];
    let mut db = vec![T::zero(); beta.len()];
    for b in 0..l.batch {
        for c in 0..l.channels {
            let idx = if l.per_sample { b * l.channels + c } else { c };
            let g = gamma.data()[idx];
            let off = (b * l.channels + c) * l.rest;
            for i in off..off + l.rest {
                let d = dy.data()[i];
                dh[i] = d * g;
                dg[idx] = dg[idx] + d * h.data()[i];
                db[idx] = db[idx] + d;
            }
        }
    }
    Ok((
        Tensor::from_vec(h.shape(), dh)?,
        Tensor::from_vec(gamma.shape(), dg)?,
        Tensor::from_vec(beta.shape(), db)?,
    ))
}

// ---------------------------------------------------------------------------
// MLP

/// Stack of [`Linear`] layers with SiLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Debug)]
pub struct MlpCache<T> {
    linear: Vec<LinearCache<T>>,
    pre_act: Vec<Tensor<T>>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [in, hidden.., out]`; layers are named `{name}.{i}`.
    pub fn new(name: &str, widths: &[usize], uniform: &mut impl FnMut() -> f64) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], uniform))
            .collect();
        Mlp { layers }
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().unwrap().out_features()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            linear: Vec::with_capacity(self.layers.len()),
            pre_act: Vec::with_capacity(self.layers.len().saturating_sub(1)),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, c) = layer.forward(&h)?;
            cache.linear.push(c);
            if i + 1 < self.layers.len() {
                h = silu(&z);
                cache.pre_act.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, mut cache: MlpCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let z = cache.pre_act.pop().expect("cache depth");
                d = silu_backward(&z, &d)?;
            }
            let c = cache.linear.pop().expect("cache depth");
            d = self.layers[i].backward(c, &d)?;
        }
        Ok(d)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

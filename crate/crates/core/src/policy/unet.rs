//! Conditional 1D temporal U-Net over action sequences.
//!
//! Layout (channels `[c0, c1, .., cL]`):
//!
//! ```text
//! x (B, Tp, A) ─► down[0] ─► ds ─► down[1] ─► ds ─► … ─► down[L] ─► mid* ─► bottleneck FiLM port
//!                                      │skip            │skip
//!                   up[…] ◄─ cat ◄─────┘   up[0] ◄─ cat ┘
//!                   ─► final conv/GN/SiLU ─► 1×1 conv ─► ε̂ (B, Tp, A)
//! ```
//!
//! Every residual block is conditioned through its own FiLM on
//! `[step embedding, observation]`. The bottleneck port is a separate,
//! externally supplied `(γ, β)` applied to the output of the mid blocks.

use nncore::layers::{
    self, film_backward, film_modulate, Conv1d, Conv1dCache, GroupNorm, GroupNormCache, Linear, LinearCache, Mlp,
    MlpCache,
};
use nncore::{Module, NnError, Param, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub step_embed: usize,
    pub mid_blocks: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            action_dim: 2,
            obs_dim: 6,
            channels: vec![64, 128, 256],
            kernel: 5,
            groups: 8,
            step_embed: 128,
            mid_blocks: 1,
        }
    }
}

impl UNetConfig {
    pub fn bottleneck_width(&self) -> usize {
        *self.channels.last().expect("at least one level")
    }

    pub fn cond_dim(&self) -> usize {
        self.step_embed + self.obs_dim
    }

    /// Horizon lengths must survive `levels − 1` halvings.
    pub fn supports_horizon(&self, horizon: usize) -> bool {
        let factor = 1usize << (self.channels.len() - 1);
        horizon > 0 && horizon % factor == 0
    }
}

/// Sinusoidal embedding of integer diffusion steps, `(B, dim)`.
pub fn step_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let scale = (10_000f64).ln() / (half.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &k in steps {
        let freqs = (0..half).map(|i| k as f64 * (-scale * i as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(s.into_iter().chain(c).map(T::from_f64_lossy));
        data.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::from_vec(&[steps.len(), dim], data).expect("embedding shape")
}

fn swap_last_two<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, m, n) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..b {
        for r in 0..m {
            for c in 0..n {
                out[(i * n + c) * m + r] = src[(i * m + r) * n + c];
            }
        }
    }
    Tensor::from_vec(&[b, n, m], out).expect("transpose shape")
}

fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<(), NnError> {
    acc.add_assign(other)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    conv1: Conv1d<T>,
    gn1: GroupNorm<T>,
    conv2: Conv1d<T>,
    gn2: GroupNorm<T>,
    cond: Linear<T>,
    residual: Option<Conv1d<T>>,
}

pub struct ResBlockCache<T> {
    conv1: Conv1dCache<T>,
    gn1: GroupNormCache<T>,
    norm1: Tensor<T>,
    act1: Tensor<T>,
    scale: Tensor<T>,
    shift: Tensor<T>,
    cond_in: Tensor<T>,
    cond_lin: LinearCache<T>,
    conv2: Conv1dCache<T>,
    gn2: GroupNormCache<T>,
    norm2: Tensor<T>,
    residual: Option<Conv1dCache<T>>,
}

impl<T: Real> ResBlock<T> {
    fn new(name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig, u: &mut impl FnMut() -> f64) -> Self {
        ResBlock {
            conv1: Conv1d::new(&format!("{name}.conv1"), c_in, c_out, cfg.kernel, 1, u),
            gn1: GroupNorm::new(&format!("{name}.gn1"), cfg.groups, c_out),
            conv2: Conv1d::new(&format!("{name}.conv2"), c_out, c_out, cfg.kernel, 1, u),
            gn2: GroupNorm::new(&format!("{name}.gn2"), cfg.groups, c_out),
            cond: Linear::new(&format!("{name}.cond"), cfg.cond_dim(), 2 * c_out, u),
            residual: (c_in != c_out).then(|| Conv1d::new(&format!("{name}.residual"), c_in, c_out, 1, 1, u)),
        }
    }

    fn c_out(&self) -> usize {
        self.conv1.c_out()
    }

    fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Result<(Tensor<T>, ResBlockCache<T>), NnError> {
        let c = self.c_out();
        let batch = x.dim(0);
        let (film, cond_lin) = self.cond.forward(&layers::silu(cond))?;
        let mut scale = Vec::with_capacity(batch * c);
        let mut shift = Vec::with_capacity(batch * c);
        for row in film.data().chunks_exact(2 * c) {
            scale.extend_from_slice(&row[..c]);
            shift.extend_from_slice(&row[c..]);
        }
        let scale = Tensor::from_vec(&[batch, c], scale)?;
        let shift = Tensor::from_vec(&[batch, c], shift)?;

        let (h1, conv1) = self.conv1.forward(x)?;
        let (norm1, gn1) = self.gn1.forward(&h1)?;
        let act1 = layers::silu(&norm1);
        let m = film_modulate(&act1, &scale, &shift)?;
        let (h2, conv2) = self.conv2.forward(&m)?;
        let (norm2, gn2) = self.gn2.forward(&h2)?;
        let mut out = layers::silu(&norm2);
        let residual = match &self.residual {
            Some(r) => {
                let (rx, rc) = r.forward(x)?;
                add_into(&mut out, &rx)?;
                Some(rc)
            }
            None => {
                add_into(&mut out, x)?;
                None
            }
        };
        Ok((
            out,
            ResBlockCache {
                conv1,
                gn1,
                norm1,
                act1,
                scale,
                shift,
                cond_in: cond.clone(),
                cond_lin,
                conv2,
                gn2,
                norm2,
                residual,
            },
        ))
    }

    /// Returns `(dx, dcond)`.
    fn backward(&mut self, cache: ResBlockCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NnError> {
        let c = self.c_out();
        let dn2 = layers::silu_backward(&cache.norm2, dy)?;
        let dh2 = self.gn2.backward(cache.gn2, &dn2)?;
        let dm = self.conv2.backward(cache.conv2, &dh2)?;
        let (da1, dscale, dshift) = film_backward(&cache.act1, &cache.scale, &cache.shift, &dm)?;
        let dn1 = layers::silu_backward(&cache.norm1, &da1)?;
        let dh1 = self.gn1.backward(cache.gn1, &dn1)?;
        let mut dx = self.conv1.backward(cache.conv1, &dh1)?;
        match (&mut self.residual, cache.residual) {
            (Some(r), Some(rc)) => add_into(&mut dx, &r.backward(rc, dy)?)?,
            _ => add_into(&mut dx, dy)?,
        }

        let batch = dscale.dim(0);
        let mut dfilm = Vec::with_capacity(batch * 2 * c);
        for (s, h) in dscale.data().chunks_exact(c).zip(dshift.data().chunks_exact(c)) {
            dfilm.extend_from_slice(s);
            dfilm.extend_from_slice(h);
        }
        let dfilm = Tensor::from_vec(&[batch, 2 * c], dfilm)?;
        let dact = self.cond.backward(cache.cond_lin, &dfilm)?;
        let dcond = layers::silu_backward(&cache.cond_in, &dact)?;
        Ok((dx, dcond))
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params());
        p.extend(self.gn1.params());
        p.extend(self.conv2.params());
        p.extend(self.gn2.params());
        p.extend(self.cond.params());
        if let Some(r) = &self.residual {
            p.extend(r.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params_mut());
        p.extend(self.gn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.gn2.params_mut());
        p.extend(self.cond.params_mut());
        if let Some(r) = &mut self.residual {
            p.extend(r.params_mut());
        }
        p
    }
}

// ---------------------------------------------------------------------------

/// Externally supplied bottleneck modulation. `gamma`/`beta` are `(l)` or
/// `(B, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmPort<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> FilmPort<T> {
    pub fn identity(width: usize) -> Self {
        FilmPort {
            gamma: Tensor::full(&[width], T::one()),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Where the backward pass stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    /// Through every layer; accumulates all unfrozen parameter gradients.
    Full,
    /// Only as far as the bottleneck port (decoder half); for training
    /// modules that drive the port while the network stays frozen.
    ToBottleneck,
}

pub struct UNetCache<T> {
    step_mlp: MlpCache<T>,
    down: Vec<ResBlockCache<T>>,
    downsample: Vec<Conv1dCache<T>>,
    mid: Vec<ResBlockCache<T>>,
    bottleneck_in: Tensor<T>,
    port: Option<FilmPort<T>>,
    up: Vec<ResBlockCache<T>>,
    upsample: Vec<Conv1dCache<T>>,
    final_conv: Conv1dCache<T>,
    final_gn: GroupNormCache<T>,
    final_norm: Tensor<T>,
    out_conv: Conv1dCache<T>,
}

#[derive(Debug)]
pub struct UNetGrads<T> {
    /// `(dγ, dβ)` when a port was active in the forward pass.
    pub port: Option<(Tensor<T>, Tensor<T>)>,
    /// Gradient w.r.t. the observation input (only for [`BackwardScope::Full`]).
    pub obs: Option<Tensor<T>>,
    /// Gradient w.r.t. the noisy action input (only for [`BackwardScope::Full`]).
    pub input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    step_mlp: Mlp<T>,
    down: Vec<ResBlock<T>>,
    downsample: Vec<Conv1d<T>>,
    mid: Vec<ResBlock<T>>,
    up: Vec<ResBlock<T>>,
    upsample: Vec<Conv1d<T>>,
    final_conv: Conv1d<T>,
    final_gn: GroupNorm<T>,
    out_conv: Conv1d<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig, u: &mut impl FnMut() -> f64) -> Self {
        let ch = &config.channels;
        assert!(!ch.is_empty() && ch.iter().all(|c| c % config.groups == 0));
        let levels = ch.len();
        let e = config.step_embed;
        let step_mlp = Mlp::new("step_mlp", &[e, 4 * e, e], u);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut c_prev = config.action_dim;
        for (i, &c) in ch.iter().enumerate() {
            down.push(ResBlock::new(&format!("down.{i}"), c_prev, c, &config, u));
            if i + 1 < levels {
                downsample.push(Conv1d::new(&format!("downsample.{i}"), c, c, 3, 2, u));
            }
            c_prev = c;
        }
        let width = config.bottleneck_width();
        let mid = (0..config.mid_blocks)
            .map(|i| ResBlock::new(&format!("mid.{i}"), width, width, &config, u))
            .collect();
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for j in 0..levels - 1 {
            let c_in = 2 * ch[levels - 1 - j];
            let c_out = ch[levels - 2 - j];
            up.push(ResBlock::new(&format!("up.{j}"), c_in, c_out, &config, u));
            upsample.push(Conv1d::new(&format!("upsample.{j}"), c_out, c_out, 3, 1, u));
        }
        let final_conv = Conv1d::new("final.conv", ch[0], ch[0], config.kernel, 1, u);
        let final_gn = GroupNorm::new("final.gn", config.groups, ch[0]);
        let out_conv = Conv1d::new("final.out", ch[0], config.action_dim, 1, 1, u);
        UNet {
            config,
            step_mlp,
            down,
            downsample,
            mid,
            up,
            upsample,
            final_conv,
            final_gn,
            out_conv,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predict the injected noise and keep everything needed for backward.
    ///
    /// `x`: `(B, Tp, A)` noisy actions; `steps`: per-sample diffusion step;
    /// `obs`: `(B, obs_dim)`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        steps: &[usize],
        obs: &Tensor<T>,
        port: Option<&FilmPort<T>>,
    ) -> Result<(Tensor<T>, UNetCache<T>), NnError> {
        let cfg = &self.config;
        if x.ndim() != 3 || x.dim(2) != cfg.action_dim || !cfg.supports_horizon(x.dim(1)) {
            return Err(NnError::dim("unet_forward", x.shape(), &[0, 0, cfg.action_dim]));
        }
        let batch = x.dim(0);
        if obs.shape() != [batch, cfg.obs_dim] || steps.len() != batch {
            return Err(NnError::dim("unet_forward", obs.shape(), &[batch, cfg.obs_dim]));
        }

        let emb = step_embedding::<T>(steps, cfg.step_embed);
        let (step_feat, step_mlp) = self.step_mlp.forward(&emb)?;
        let cond = concat_rows(&step_feat, obs)?;

        let levels = cfg.channels.len();
        let mut h = swap_last_two(x);
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::with_capacity(levels - 1);
        for i in 0..levels {
            let (y, c) = self.down[i].forward(&h, &cond)?;
            down.push(c);
            skips.push(y.clone());
            h = y;
            if i + 1 < levels {
                let (y, c) = self.downsample[i].forward(&h)?;
                downsample.push(c);
                h = y;
            }
        }
        let mut mid = Vec::with_capacity(self.mid.len());
        for block in &self.mid {
            let (y, c) = block.forward(&h, &cond)?;
            mid.push(c);
            h = y;
        }
        let bottleneck_in = h.clone();
        if let Some(p) = port {
            h = film_modulate(&h, &p.gamma, &p.beta)?;
        }
        let mut up = Vec::with_capacity(levels - 1);
        let mut upsample = Vec::with_capacity(levels - 1);
        for j in 0..levels - 1 {
            let cat = Tensor::concat_channels(&h, &skips[levels - 1 - j])?;
            let (y, c) = self.up[j].forward(&cat, &cond)?;
            up.push(c);
            let y = layers::upsample2(&y)?;
            let (y, c) = self.upsample[j].forward(&y)?;
            upsample.push(c);
            h = y;
        }
        let (y, final_conv) = self.final_conv.forward(&h)?;
        let (final_norm, final_gn) = self.final_gn.forward(&y)?;
        let y = layers::silu(&final_norm);
        let (y, out_conv) = self.out_conv.forward(&y)?;
        Ok((
            swap_last_two(&y),
            UNetCache {
                step_mlp,
                down,
                downsample,
                mid,
                bottleneck_in,
                port: port.cloned(),
                up,
                upsample,
                final_conv,
                final_gn,
                final_norm,
                out_conv,
            },
        ))
    }

    /// Inference-only forward.
    pub fn predict(
        &self,
        x: &Tensor<T>,
        steps: &[usize],
        obs: &Tensor<T>,
        port: Option<&FilmPort<T>>,
    ) -> Result<Tensor<T>, NnError> {
        Ok(self.forward(x, steps, obs, port)?.0)
    }

    pub fn backward(
        &mut self,
        cache: UNetCache<T>,
        dy: &Tensor<T>,
        scope: BackwardScope,
    ) -> Result<UNetGrads<T>, NnError> {
        let levels = self.config.channels.len();
        let UNetCache {
            step_mlp,
            down,
            downsample,
            mid,
            bottleneck_in,
            port,
            mut up,
            mut upsample,
            final_conv,
            final_gn,
            final_norm,
            out_conv,
        } = cache;

        let mut d = swap_last_two(dy);
        d = self.out_conv.backward(out_conv, &d)?;
        d = layers::silu_backward(&final_norm, &d)?;
        d = self.final_gn.backward(final_gn, &d)?;
        d = self.final_conv.backward(final_conv, &d)?;

        let mut dcond: Option<Tensor<T>> = None;
        let mut accumulate = |dc: Tensor<T>| -> Result<(), NnError> {
            match &mut dcond {
                Some(acc) => acc.add_assign(&dc),
                None => {
                    dcond = Some(dc);
                    Ok(())
                }
            }
        };

        let mut dskips: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for j in (0..levels - 1).rev() {
            d = self.upsample[j].backward(upsample.pop().expect("cache"), &d)?;
            d = layers::upsample2_backward(&d)?;
            let (dcat, dc) = self.up[j].backward(up.pop().expect("cache"), &d)?;
            accumulate(dc)?;
            let h_channels = self.config.channels[levels - 1 - j];
            let (dh, dskip) = dcat.split_channels(h_channels)?;
            dskips[levels - 1 - j] = Some(dskip);
            d = dh;
        }

        let port_grads = match &port {
            Some(p) => {
                let (dh, dg, db) = film_backward(&bottleneck_in, &p.gamma, &p.beta, &d)?;
                d = dh;
                Some((dg, db))
            }
            None => None,
        };

        if scope == BackwardScope::ToBottleneck {
            return Ok(UNetGrads {
                port: port_grads,
                obs: None,
                input: None,
            });
        }

        for (block, c) in self.mid.iter_mut().zip(mid).rev() {
            let (dx, dc) = block.backward(c, &d)?;
            accumulate(dc)?;
            d = dx;
        }
        let mut down = down;
        let mut downsample = downsample;
        for i in (0..levels).rev() {
            if i + 1 < levels {
                d = self.downsample[i].backward(downsample.pop().expect("cache"), &d)?;
            }
            if let Some(ds) = dskips[i].take() {
                d.add_assign(&ds)?;
            }
            let (dx, dc) = self.down[i].backward(down.pop().expect("cache"), &d)?;
            accumulate(dc)?;
            d = dx;
        }

        let dcond = dcond.expect("at least one residual block");
        let e = self.config.step_embed;
        let (dstep, dobs) = split_rows(&dcond, e)?;
        self.step_mlp.backward(step_mlp, &dstep)?;
        Ok(UNetGrads {
            port: port_grads,
            obs: Some(dobs),
            input: Some(swap_last_two(&d)),
        })
    }
}

fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0) {
        return Err(NnError::dim("concat_rows", a.shape(), b.shape()));
    }
    let (n, ca, cb) = (a.dim(0), a.dim(1), b.dim(1));
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::from_vec(&[n, ca + cb], data)
}

fn split_rows<T: Real>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (n, c) = (x.dim(0), x.dim(1));
    let mut a = Vec::with_capacity(n * ca);
    let mut b = Vec::with_capacity(n * (c - ca));
    for row in x.data().chunks_exact(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    Ok((Tensor::from_vec(&[n, ca], a)?, Tensor::from_vec(&[n, c - ca], b)?))
}

impl<T: Real> Module<T> for UNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.step_mlp.params();
        for (i, b) in self.down.iter().enumerate() {
            p.extend(b.params());
            if let Some(ds) = self.downsample.get(i) {
                p.extend(ds.params());
            }
        }
        for b in &self.mid {
            p.extend(b.params());
        }
        for (b, us) in self.up.iter().zip(&self.upsample) {
            p.extend(b.params());
            p.extend(us.params());
        }
        p.extend(self.final_conv.params());
        p.extend(self.final_gn.params());
        p.extend(self.out_conv.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.step_mlp.params_mut();
        let mut ds_iter = self.downsample.iter_mut();
        for b in self.down.iter_mut() {
            p.extend(b.params_mut());
            if let Some(ds) = ds_iter.next() {
                p.extend(ds.params_mut());
            }
        }
        for b in self.mid.iter_mut() {
            p.extend(b.params_mut());
        }
        for (b, us) in self.up.iter_mut().zip(self.upsample.iter_mut()) {
            p.extend(b.params_mut());
            p.extend(us.params_mut());
        }
        p.extend(self.final_conv.params_mut());
        p.extend(self.final_gn.params_mut());
        p.extend(self.out_conv.params_mut());
        p
    }
}

use crate::error::ScdpError;
use crate::rng::SimRng;

/// Offset of the squared-cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
/// Upper bound on a single-step β.
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    SquaredCosine,
}

/// DDPM schedule indexed by diffusion step `k ∈ 0..=K`; index 0 is the clean
/// signal (`ᾱ₀ = 1`, `β₀ = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Coefficients of one reverse step
/// `x_{k-1} = scale · (x_k − eps_coef · ε̂) + sigma · z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub scale: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn new(k: usize, kind: ScheduleKind) -> Result<Self, ScdpError> {
        if k < 1 {
            return Err(ScdpError::Argument("diffusion step count K must be ≥ 1".into()));
        }
        let ScheduleKind::SquaredCosine = kind;
        let f = |t: f64| {
            let a = (t / k as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let mut betas = vec![0.0];
        let mut alpha_bar = vec![1.0];
        for i in 0..k {
            let beta = (1.0 - f((i + 1) as f64) / f(i as f64)).min(MAX_BETA);
            betas.push(beta);
            alpha_bar.push(alpha_bar[i] * (1.0 - beta));
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// Rebuild from stored cumulative products (checkpoint round trip).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, ScdpError> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(ScdpError::Data(
                "schedule.alphabar must start at 1 and have K ≥ 1".into(),
            ));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0]) || w[1] <= 0.0) {
            return Err(ScdpError::Data(
                "schedule.alphabar must be strictly decreasing and positive".into(),
            ));
        }
        let betas = std::iter::once(0.0)
            .chain(alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]))
            .collect();
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    /// Reverse-step coefficients for `k ∈ 1..=K`. Noise enters outside the
    /// scaled bracket (DDPM posterior sampling); `sigma` at `k = 1` is zero.
    pub fn coefficients(&self, k: usize) -> StepCoefficients {
        assert!((1..=self.steps()).contains(&k), "step {k} out of range");
        let beta = self.betas[k];
        let ab = self.alpha_bar[k];
        let ab_prev = self.alpha_bar[k - 1];
        let variance = if k > 1 {
            beta * (1.0 - ab_prev) / (1.0 - ab)
        } else {
            0.0
        };
        StepCoefficients {
            scale: 1.0 / (1.0 - beta).sqrt(),
            eps_coef: beta / (1.0 - ab).sqrt(),
            sigma: variance.sqrt(),
        }
    }

    /// Posterior-mean weights `(c_x0, c_xk)` of
    /// `μ = c_x0·x̂₀ + c_xk·x_k` for `k ∈ 1..=K`. Substituting
    /// `x̂₀ = (x_k − √(1−ᾱ_k)·ε̂)/√ᾱ_k` recovers [`StepCoefficients`].
    pub fn posterior_weights(&self, k: usize) -> (f64, f64) {
        assert!((1..=self.steps()).contains(&k), "step {k} out of range");
        let beta = self.betas[k];
        let (ab, ab_prev) = (self.alpha_bar[k], self.alpha_bar[k - 1]);
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }

    /// `x_k = √ᾱ_k·x0 + √(1−ᾱ_k)·ε`, returning `(x_k, ε)`.
    pub fn forward_noise(&self, x0: &[f64], k: usize, rng: &mut SimRng) -> (Vec<f64>, Vec<f64>) {
        assert!((1..=self.steps()).contains(&k), "step {k} out of range");
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
        (self.noised(x0, k, &eps), eps)
    }

    /// Deterministic part of [`NoiseSchedule::forward_noise`] for a given ε.
    pub fn noised(&self, x0: &[f64], k: usize, eps: &[f64]) -> Vec<f64> {
        let (a, s) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
    }
}

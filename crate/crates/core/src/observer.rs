//! Bayesian goal inference, legibility, and the two ambiguity tests.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::world::Scene;

/// Temporal weighting inside the legibility sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    /// `f(t) = T − t`, emphasizes early steps.
    TRev,
    /// `f(t) = t`.
    T,
    /// `f(t) = 1`.
    Const,
}

impl WeightFn {
    fn weight(self, t: usize, horizon: usize) -> f64 {
        match self {
            WeightFn::TRev => (horizon - t) as f64,
            WeightFn::T => t as f64,
            WeightFn::Const => 1.0,
        }
    }
}

impl std::fmt::Display for WeightFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightFn::TRev => "t_rev",
            WeightFn::T => "t",
            WeightFn::Const => "const",
        })
    }
}

impl std::str::FromStr for WeightFn {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_rev" => Ok(WeightFn::TRev),
            "t" => Ok(WeightFn::T),
            "const" => Ok(WeightFn::Const),
            _ => Err(ScdpError::Argument(format!(
                "unknown weight function {s:?} (t_rev|t|const)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub lambda: f64,
    pub tau: f64,
    pub weight_fn: WeightFn,
    /// Fraction of the straight path the observer watches before the
    /// probabilistic ambiguity test starts taking minima.
    pub warmup: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            lambda: 5.0,
            tau: 0.2,
            weight_fn: WeightFn::TRev,
            warmup: 0.25,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(ScdpError::Argument("observer.lambda must be > 0".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ScdpError::Argument("observer.tau must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(ScdpError::Argument("observer.warmup must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseConfig {
    pub kappa: f64,
    pub eccentricity: f64,
}

impl Default for EllipseConfig {
    fn default() -> Self {
        EllipseConfig {
            kappa: 0.75,
            eccentricity: 0.9,
        }
    }
}

impl EllipseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa < 1.0) {
            return Err(ScdpError::Argument("ellipse.kappa must lie in (0.5, 1)".into()));
        }
        if !(self.eccentricity > 0.0 && self.eccentricity < 1.0) {
            return Err(ScdpError::Argument("ellipse.eccentricity must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn path_length(states: &[Vec2]) -> f64 {
    states.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Posterior from accumulated cost `cost` at position `at`; goals ordered
/// `[g*, negatives..]`.
fn posterior_at(cost: f64, at: Vec2, scene: &Scene, lambda: f64) -> Vec<f64> {
    let logits: Vec<f64> = scene
        .goals()
        .map(|g| lambda * (-cost - at.dist(g) + scene.start.dist(g)))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `P(g | ξ_{0→t})` for every goal, target first.
pub fn goal_posterior(partial: &[Vec2], scene: &Scene, cfg: &ObserverConfig) -> Vec<f64> {
    let at = *partial.last().expect("partial trajectory must be non-empty");
    posterior_at(path_length(partial), at, scene, cfg.lambda)
}

/// Posterior of the target after each prefix `ξ_{0→t}`, `t = 0..=T`.
pub fn target_posterior_series(states: &[Vec2], scene: &Scene, cfg: &ObserverConfig) -> Vec<f64> {
    let mut cost = 0.0;
    let mut out = Vec::with_capacity(states.len());
    for (t, &s) in states.iter().enumerate() {
        if t > 0 {
            cost += states[t - 1].dist(s);
        }
        out.push(posterior_at(cost, s, scene, cfg.lambda)[0]);
    }
    out
}

/// Weighted mean of the target posterior over the trajectory.
pub fn legibility_score(states: &[Vec2], scene: &Scene, cfg: &ObserverConfig) -> f64 {
    let series = target_posterior_series(states, scene, cfg);
    let horizon = states.len() - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, p) in series.iter().enumerate() {
        let w = cfg.weight_fn.weight(t, horizon);
        num += p * w;
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        series[0]
    }
}

/// Straight line `s_0 → g*` with `steps` equally spaced states.
pub fn straight_line(from: Vec2, to: Vec2, steps: usize) -> Vec<Vec2> {
    let n = steps.max(2) - 1;
    (0..=n)
        .map(|i| if i == n { to } else { from.lerp(to, i as f64 / n as f64) })
        .collect()
}

/// Smallest posterior gap `P(g*) − P(g⁻)` along the straight path, over
/// states past the warm-up fraction. Returns one value per negative.
pub fn posterior_gaps(scene: &Scene, cfg: &ObserverConfig, steps: usize) -> Vec<f64> {
    let path = straight_line(scene.start, scene.goal, steps);
    let n = path.len() - 1;
    let first = ((cfg.warmup * n as f64).ceil() as usize).max(1);
    let mut gaps = vec![f64::INFINITY; scene.negatives.len()];
    let mut cost = 0.0;
    for t in 1..=n {
        cost += path[t - 1].dist(path[t]);
        if t < first {
            continue;
        }
        let p = posterior_at(cost, path[t], scene, cfg.lambda);
        for (gap, pn) in gaps.iter_mut().zip(&p[1..]) {
            *gap = gap.min(p[0] - pn);
        }
    }
    gaps
}

/// Posterior-threshold ambiguity test on the efficient straight path.
pub fn probabilistic_ambiguity(scene: &Scene, cfg: &ObserverConfig, steps: usize) -> bool {
    posterior_gaps(scene, cfg, steps).iter().any(|&g| g < cfg.tau)
}

/// Ellipse with the current state as a focus and its center pulled toward
/// the goal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: Vec2,
    pub a: f64,
    pub b: f64,
    /// Row-major symmetric `M`.
    pub m: [[f64; 2]; 2],
}

impl Ellipse {
    pub fn quadratic_form(&self, p: Vec2) -> f64 {
        let d = p - self.center;
        let m = &self.m;
        d.x * (m[0][0] * d.x + m[0][1] * d.y) + d.y * (m[1][0] * d.x + m[1][1] * d.y)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.quadratic_form(p) <= 1.0
    }
}

pub fn ellipse_matrix(s_t: Vec2, goal: Vec2, cfg: &EllipseConfig) -> Result<Ellipse> {
    let axis = goal - s_t;
    let d = axis.norm();
    if !(d > 0.0) {
        return Err(ScdpError::DegenerateScene(format!(
            "state {:?} coincides with the target",
            [s_t.x, s_t.y]
        )));
    }
    let center = s_t + axis * cfg.kappa;
    let a = cfg.kappa * d / cfg.eccentricity;
    let b = a * (1.0 - cfg.eccentricity * cfg.eccentricity).sqrt();
    let (c, s) = (axis.x / d, axis.y / d);
    let (ia, ib) = (1.0 / (a * a), 1.0 / (b * b));
    // R diag(ia, ib) Rᵀ with R = [[c, −s], [s, c]]
    let m = [
        [c * c * ia + s * s * ib, c * s * (ia - ib)],
        [c * s * (ia - ib), s * s * ia + c * c * ib],
    ];
    Ok(Ellipse { center, a, b, m })
}

/// Whether any distractor falls inside the ellipse anchored at `s_t`.
pub fn detect_ambiguity(scene: &Scene, s_t: Vec2, cfg: &EllipseConfig) -> Result<bool> {
    let e = ellipse_matrix(s_t, scene.goal, cfg)?;
    Ok(scene.negatives.iter().any(|&g| e.contains(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Task;

    fn scene(start: Vec2, goal: Vec2, negatives: Vec<Vec2>) -> Scene {
        Scene {
            task: Task::Navigation,
            start,
            goal,
            negatives,
        }
    }

    #[test]
    fn empty_prefix_is_uniform() {
        let s = scene(
            Vec2::new(0.5, 0.1),
            Vec2::new(0.2, 0.8),
            vec![Vec2::new(0.8, 0.8), Vec2::new(0.5, 0.9)],
        );
        let p = goal_posterior(&[s.start], &s, &ObserverConfig::default());
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn const_weight_is_plain_mean() {
        let s = scene(Vec2::new(0.1, 0.1), Vec2::new(0.9, 0.1), vec![Vec2::new(0.5, 0.4)]);
        let path = straight_line(s.start, s.goal, 20);
        let cfg = ObserverConfig {
            weight_fn: WeightFn::Const,
            ..Default::default()
        };
        let series = target_posterior_series(&path, &s, &cfg);
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        assert!((legibility_score(&path, &s, &cfg) - mean).abs() < 1e-15);
    }

    #[test]
    fn degenerate_ellipse_is_an_error() {
        let p = Vec2::new(0.3, 0.3);
        assert!(matches!(
            ellipse_matrix(p, p, &EllipseConfig::default()),
            Err(ScdpError::DegenerateScene(_))
        ));
    }

    #[test]
    fn weight_fn_parses() {
        assert_eq!("t_rev".parse::<WeightFn>().unwrap(), WeightFn::TRev);
        assert!("linear".parse::<WeightFn>().is_err());
    }
}

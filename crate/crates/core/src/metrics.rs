//! Trajectory metrics and dataset-anchored min-max normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::world::Demo;

pub const EFFICIENCY_EPS: f64 = 1e-6;

/// `Σ_{t≥1} ‖g⁻ − s_t‖ / t`.
pub fn detachment(states: &[Vec2], negative: Vec2) -> f64 {
    states
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, &s)| negative.dist(s) / t as f64)
        .sum()
}

/// Reciprocal path length with an additive guard.
pub fn efficiency(states: &[Vec2], eps: f64) -> f64 {
    let len: f64 = states.windows(2).map(|w| w[0].dist(w[1])).sum();
    1.0 / (len + eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransparencyParams {
    pub u: f64,
    pub x0: f64,
}

impl Default for TransparencyParams {
    fn default() -> Self {
        TransparencyParams { u: 2.5, x0: 0.5 }
    }
}

/// Which term the ambiguity weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransparencyOrder {
    /// `(1 − w)·D̂ + w·Ê`
    Eq10,
    /// `w·D̂ + (1 − w)·Ê`
    Swapped,
}

impl std::fmt::Display for TransparencyOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransparencyOrder::Eq10 => "eq10",
            TransparencyOrder::Swapped => "swapped",
        })
    }
}

impl std::str::FromStr for TransparencyOrder {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq10" => Ok(TransparencyOrder::Eq10),
            "swapped" => Ok(TransparencyOrder::Swapped),
            _ => Err(ScdpError::Argument(format!(
                "unknown transparency order {s:?} (eq10|swapped)"
            ))),
        }
    }
}

/// Sigmoid weight of the normalized inter-goal distance.
pub fn w_amb(j_normalized: f64, p: &TransparencyParams) -> f64 {
    1.0 / (1.0 + (-p.u * (j_normalized - p.x0)).exp())
}

pub fn transparency(d_hat: f64, e_hat: f64, w: f64) -> f64 {
    (1.0 - w) * d_hat + w * e_hat
}

pub fn transparency_ordered(d_hat: f64, e_hat: f64, w: f64, order: TransparencyOrder) -> f64 {
    match order {
        TransparencyOrder::Eq10 => transparency(d_hat, e_hat, w),
        TransparencyOrder::Swapped => transparency(d_hat, e_hat, 1.0 - w),
    }
}

/// Final state strictly inside `radius` of the goal.
pub fn success(final_state: Vec2, goal: Vec2, radius: f64) -> bool {
    final_state.dist(goal) < radius
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn fit(name: &str, values: impl Iterator<Item = f64>) -> Result<Self> {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(ScdpError::Data(format!(
                "cannot normalize {name}: degenerate range [{min}, {max}]"
            )));
        }
        Ok(MinMax { min, max })
    }

    /// Affine, unclamped.
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Min-max statistics of detachment, efficiency and inter-goal distance
/// over a training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub detachment: MinMax,
    pub efficiency: MinMax,
    pub goal_distance: MinMax,
}

/// Raw and normalized metrics of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub d: f64,
    pub e: f64,
    pub d_hat: f64,
    pub e_hat: f64,
    pub w_amb: f64,
    pub t: f64,
}

impl Normalizer {
    pub fn fit(demos: &[Demo]) -> Result<Self> {
        if demos.len() < 2 {
            return Err(ScdpError::Data("normalizer needs at least two demos".into()));
        }
        let neg = |d: &Demo| d.trajectory.scene.negatives[0];
        Ok(Normalizer {
            detachment: MinMax::fit(
                "detachment",
                demos.iter().map(|d| detachment(&d.trajectory.states, neg(d))),
            )?,
            efficiency: MinMax::fit(
                "efficiency",
                demos.iter().map(|d| efficiency(&d.trajectory.states, EFFICIENCY_EPS)),
            )?,
            goal_distance: MinMax::fit(
                "inter-goal distance",
                demos.iter().map(|d| d.trajectory.scene.goal.dist(neg(d))),
            )?,
        })
    }

    pub fn score(
        &self,
        states: &[Vec2],
        goal: Vec2,
        negative: Vec2,
        params: &TransparencyParams,
        order: TransparencyOrder,
    ) -> EpisodeMetrics {
        let d = detachment(states, negative);
        let e = efficiency(states, EFFICIENCY_EPS);
        let d_hat = self.detachment.apply(d);
        let e_hat = self.efficiency.apply(e);
        let w = w_amb(self.goal_distance.apply(goal.dist(negative)), params);
        EpisodeMetrics {
            d,
            e,
            d_hat,
            e_hat,
            w_amb: w,
            t: transparency_ordered(d_hat, e_hat, w, order),
        }
    }
}

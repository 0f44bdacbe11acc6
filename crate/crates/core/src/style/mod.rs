//! Scene encoding, style predictors and frozen-base post-training.

mod bundle;
mod encoder;
mod predictor;

pub use bundle::{
    conditioned_rollout, conditioned_rollout_batch, sha256_hex, ArtifactRef, BundleManifest, PredictorRef, StyleBundle,
    StyleSelector, MANIFEST_FILE,
};
pub use encoder::{train_encoder, EncoderConfig, EncoderReport, SceneEncoder};
pub use predictor::{post_train_style, PredictorConfig, StylePredictor};

use nncore::NnError;

use crate::world::Scene;

/// `[g*, 0, 0, 0, g⁻₁, r₁, j₁, …]` with `r_i = g⁻_i − g*`, `j_i = ‖r_i‖`.
pub fn enrich_scene(scene: &Scene) -> Vec<f64> {
    let g = scene.goal;
    let mut x = Vec::with_capacity(5 * (scene.negatives.len() + 1));
    x.extend([g.x, g.y, 0.0, 0.0, 0.0]);
    for &n in &scene.negatives {
        let r = n - g;
        x.extend([n.x, n.y, r.x, r.y, r.norm()]);
    }
    x
}

/// Width of the enriched vector for `n_negatives` distractors.
pub fn enriched_width(n_negatives: usize) -> usize {
    5 * (n_negatives + 1)
}

pub(crate) fn check_width(scene: &Scene, expected: usize) -> Result<(), NnError> {
    let found = enriched_width(scene.negatives.len());
    if found != expected {
        return Err(NnError::dim("enrich_scene", &[found], &[expected]));
    }
    Ok(())
}

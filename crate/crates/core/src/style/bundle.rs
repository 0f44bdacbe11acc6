use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nncore::checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::SceneEncoder;
use super::predictor::StylePredictor;
use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::observer::{self, EllipseConfig};
use crate::policy::{FilmRow, FilmSelector, Policy, Rollout, RolloutConfig, Selection};
use crate::world::{dataset_load, Demo, Scene, Style, SubsetRanking, Task};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRef {
    pub path: String,
    pub sha256: String,
    pub subset_fraction: f64,
    pub subset_ranking: SubsetRanking,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub task: Task,
    pub dataset: ArtifactRef,
    pub base: ArtifactRef,
    pub encoder: ArtifactRef,
    #[serde(default)]
    pub predictors: BTreeMap<Style, PredictorRef>,
    /// Effective configuration at the last write, as `key=value` pairs.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

fn resolve(dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Read an artifact and check it against its recorded digest.
fn read_verified(dir: &Path, path: &str, sha256: &str) -> Result<Vec<u8>> {
    let full = resolve(dir, path);
    let bytes = std::fs::read(&full)
        .map_err(|e| ScdpError::Data(format!("cannot read bundle artifact {}: {e}", full.display())))?;
    let found = sha256_hex(&bytes);
    if found != sha256 {
        return Err(ScdpError::Integrity(format!(
            "{} has sha256 {found}, manifest records {sha256}",
            full.display()
        )));
    }
    Ok(bytes)
}

impl ArtifactRef {
    pub fn for_file(dir: &Path, path: &str) -> Result<Self> {
        let bytes = std::fs::read(resolve(dir, path))?;
        Ok(ArtifactRef {
            path: path.to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

impl BundleManifest {
    pub fn new(task: Task, dataset: ArtifactRef, base: ArtifactRef, encoder: ArtifactRef) -> Self {
        BundleManifest {
            version: MANIFEST_VERSION,
            task,
            dataset,
            base,
            encoder,
            predictors: BTreeMap::new(),
            config: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ScdpError::Data(format!("cannot read {}: {e}", path.display())))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(ScdpError::Data(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        checkpoint::write_atomic(&dir.join(MANIFEST_FILE), &text)?;
        Ok(())
    }
}

/// Frozen base, scene encoder and style predictors, loaded and verified.
#[derive(Debug, Clone)]
pub struct StyleBundle {
    pub dir: PathBuf,
    pub manifest: BundleManifest,
    pub policy: Policy,
    pub encoder: SceneEncoder,
    pub predictors: BTreeMap<Style, StylePredictor>,
    pub demos: Vec<Demo>,
}

impl StyleBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = BundleManifest::load(dir)?;
        let base = read_verified(dir, &manifest.base.path, &manifest.base.sha256)?;
        let policy = Policy::from_tensors(&checkpoint::decode(&base)?)?;
        let enc = read_verified(dir, &manifest.encoder.path, &manifest.encoder.sha256)?;
        let encoder = SceneEncoder::from_tensors(&checkpoint::decode(&enc)?)?;
        read_verified(dir, &manifest.dataset.path, &manifest.dataset.sha256)?;
        let demos = dataset_load(&resolve(dir, &manifest.dataset.path))?;
        let mut predictors = BTreeMap::new();
        for (style, r) in &manifest.predictors {
            let bytes = read_verified(dir, &r.path, &r.sha256)?;
            let p = StylePredictor::from_tensors(&checkpoint::decode(&bytes)?)?;
            if p.style != *style {
                return Err(ScdpError::Data(format!(
                    "{} holds a {} predictor, not {style}",
                    r.path, p.style
                )));
            }
            predictors.insert(*style, p);
        }
        Ok(StyleBundle {
            dir: dir.to_path_buf(),
            manifest,
            policy,
            encoder,
            predictors,
            demos,
        })
    }

    pub fn predictor(&self, style: Style) -> Result<&StylePredictor> {
        self.predictors
            .get(&style)
            .ok_or_else(|| ScdpError::Argument(format!("bundle has no {style} predictor")))
    }

    pub fn film_rows(&self, scenes: &[&Scene], style: Style) -> Result<Vec<FilmRow>> {
        let c = self.encoder.encode(scenes)?;
        self.predictor(style)?.film_rows(&c)
    }

    /// `(γ, β)` of one style for one scene.
    pub fn predict_film(&self, scene: &Scene, style: Style) -> Result<FilmRow> {
        Ok(self.film_rows(&[scene], style)?.pop().expect("one row"))
    }

    pub fn selector(&self, scenes: &[Scene], ellipse: EllipseConfig) -> Result<StyleSelector> {
        let refs: Vec<&Scene> = scenes.iter().collect();
        let legible = self.film_rows(&refs, Style::Legible)?;
        let predictable = self.film_rows(&refs, Style::Predictable)?;
        Ok(StyleSelector {
            rows: legible.into_iter().zip(predictable).map(|(l, p)| [l, p]).collect(),
            ellipse,
        })
    }
}

/// Legible modulation while a distractor sits inside the ellipse of
/// ambiguity, predictable otherwise.
#[derive(Debug, Clone)]
pub struct StyleSelector {
    /// Per episode: `[legible, predictable]`.
    pub rows: Vec<[FilmRow; 2]>,
    pub ellipse: EllipseConfig,
}

impl FilmSelector for StyleSelector {
    fn select(&self, episode: usize, scene: &Scene, state: Vec2) -> Result<Selection> {
        let ambiguous = match observer::detect_ambiguity(scene, state, &self.ellipse) {
            Ok(v) => v,
            Err(ScdpError::DegenerateScene(_)) => false,
            Err(e) => return Err(e),
        };
        let (style, idx) = if ambiguous {
            (Style::Legible, 0)
        } else {
            (Style::Predictable, 1)
        };
        Ok(Selection {
            style: Some(style),
            film: Some(self.rows[episode][idx].clone()),
        })
    }
}

pub fn conditioned_rollout_batch(
    bundle: &StyleBundle,
    scenes: &[Scene],
    seeds: &[u64],
    ellipse: &EllipseConfig,
    cfg: &RolloutConfig,
) -> Result<Vec<Rollout>> {
    let selector = bundle.selector(scenes, *ellipse)?;
    bundle.policy.rollout_batch(scenes, seeds, &selector, cfg)
}

pub fn conditioned_rollout(
    bundle: &StyleBundle,
    scene: &Scene,
    seed: u64,
    ellipse: &EllipseConfig,
    cfg: &RolloutConfig,
) -> Result<Rollout> {
    Ok(
        conditioned_rollout_batch(bundle, std::slice::from_ref(scene), &[seed], ellipse, cfg)?
            .pop()
            .expect("one episode"),
    )
}

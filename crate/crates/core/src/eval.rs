//! Evaluation harness: per-episode metric rows and per-split aggregates.

use std::fmt;
use std::path::Path;

use nncore::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{Result, ScdpError};
use crate::metrics::{EpisodeMetrics, Normalizer};
use crate::observer;
use crate::policy::{IdentitySelector, Rollout};
use crate::rng::SimRng;
use crate::style::{conditioned_rollout_batch, StyleBundle};
use crate::world::{sample_scene, AmbiguityMode, Demo, Scene, Style, Trajectory};

pub const EPISODES_FILE: &str = "episodes.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Mixed into episode seeds before scene sampling so the scene stream and
/// the sampler stream of an episode differ.
const SCENE_SALT: u64 = 0x5ce0_e5a1_7000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Ambiguous,
    Clear,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Ambiguous, Split::Clear];

    pub fn mode(self) -> AmbiguityMode {
        match self {
            Split::Ambiguous => AmbiguityMode::Ambiguous,
            Split::Clear => AmbiguityMode::Clear,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ambiguous => "ambiguous",
            Split::Clear => "clear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaseDp,
    Scdp,
    DatasetStats,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::BaseDp, Method::Scdp, Method::DatasetStats];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::BaseDp => "base_dp",
            Method::Scdp => "scdp",
            Method::DatasetStats => "dataset_stats",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_dp" => Ok(Method::BaseDp),
            "scdp" => Ok(Method::Scdp),
            "dataset_stats" => Ok(Method::DatasetStats),
            _ => Err(ScdpError::Argument(format!(
                "unknown method {s:?} (base_dp|scdp|dataset_stats)"
            ))),
        }
    }
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub split: Split,
    pub method: Method,
    /// Sampler seed; empty for dataset rows.
    pub seed: Option<u64>,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "D_hat")]
    pub d_hat: f64,
    #[serde(rename = "E_hat")]
    pub e_hat: f64,
    pub w_amb: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub success: bool,
    pub steps: usize,
    /// One letter per replan, `L` legible or `P` predictable.
    pub style_decisions: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: Split,
    pub method: Method,
    pub episodes: usize,
    pub success_rate: f64,
    pub d: MeanStd,
    pub e: MeanStd,
    pub d_hat: MeanStd,
    pub e_hat: MeanStd,
    pub w_amb: MeanStd,
    pub t: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<Aggregate>,
}

impl MetricReport {
    pub fn aggregate(&self, split: Split, method: Method) -> Option<&Aggregate> {
        self.summary.iter().find(|a| a.split == split && a.method == method)
    }
}

/// Aggregates for every `(split, method)` group present in `rows`, in
/// order of first appearance.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<Aggregate> {
    let mut groups: Vec<(Split, Method)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.split, r.method)) {
            groups.push((r.split, r.method));
        }
    }
    groups
        .into_iter()
        .map(|(split, method)| {
            let g: Vec<&EpisodeRow> = rows.iter().filter(|r| r.split == split && r.method == method).collect();
            let stat = |f: fn(&EpisodeRow) -> f64| MeanStd::of(g.iter().map(|r| f(r)));
            Aggregate {
                split,
                method,
                episodes: g.len(),
                success_rate: g.iter().filter(|r| r.success).count() as f64 / g.len() as f64,
                d: stat(|r| r.d),
                e: stat(|r| r.e),
                d_hat: stat(|r| r.d_hat),
                e_hat: stat(|r| r.e_hat),
                w_amb: stat(|r| r.w_amb),
                t: stat(|r| r.t),
            }
        })
        .collect()
}

/// Scene and sampler seed of every episode of a split. Episode `i` uses
/// seed `first_seed + i` whatever the episode count.
pub fn eval_scenes(settings: &Settings, split: Split, episodes: usize) -> Result<Vec<(Scene, u64)>> {
    (0..episodes)
        .map(|i| {
            let seed = settings.eval.seed.wrapping_add(i as u64);
            let mut rng = SimRng::new(seed ^ SCENE_SALT);
            let scene = sample_scene(
                settings.task,
                &mut rng,
                split.mode(),
                settings.data.negatives,
                &settings.ellipse,
            )?;
            Ok((scene, seed))
        })
        .collect()
}

fn decisions_string(decisions: &[Style]) -> String {
    decisions
        .iter()
        .map(|s| match s {
            Style::Legible => 'L',
            Style::Predictable => 'P',
        })
        .collect()
}

fn score(settings: &Settings, norm: &Normalizer, tr: &Trajectory) -> EpisodeMetrics {
    norm.score(
        &tr.states,
        tr.scene.goal,
        tr.scene.negatives[0],
        &settings.transparency,
        settings.transparency_order,
    )
}

fn rollout_rows(
    settings: &Settings,
    norm: &Normalizer,
    split: Split,
    method: Method,
    seeds: &[u64],
    rollouts: Vec<Rollout>,
) -> Vec<EpisodeRow> {
    rollouts
        .into_iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (r, &seed))| {
            let m = score(settings, norm, &r.trajectory);
            EpisodeRow {
                episode: i,
                split,
                method,
                seed: Some(seed),
                d: m.d,
                e: m.e,
                d_hat: m.d_hat,
                e_hat: m.e_hat,
                w_amb: m.w_amb,
                t: m.t,
                success: r.success,
                steps: r.trajectory.states.len() - 1,
                style_decisions: decisions_string(&r.decisions),
            }
        })
        .collect()
}

/// Training demos of a split, scored; the split is decided by the ellipse
/// detector at the start state.
pub fn dataset_rows(settings: &Settings, norm: &Normalizer, demos: &[Demo], split: Split) -> Result<Vec<EpisodeRow>> {
    let mut rows = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        let scene = &d.trajectory.scene;
        let ambiguous = match observer::detect_ambiguity(scene, scene.start, &settings.ellipse) {
            Ok(v) => v,
            Err(ScdpError::DegenerateScene(_)) => false,
            Err(e) => return Err(e),
        };
        if ambiguous != (split == Split::Ambiguous) {
            continue;
        }
        let m = score(settings, norm, &d.trajectory);
        rows.push(EpisodeRow {
            episode: i,
            split,
            method: Method::DatasetStats,
            seed: None,
            d: m.d,
            e: m.e,
            d_hat: m.d_hat,
            e_hat: m.e_hat,
            w_amb: m.w_amb,
            t: m.t,
            success: crate::metrics::success(d.trajectory.final_state(), scene.goal, settings.rollout.goal_radius),
            steps: d.trajectory.states.len() - 1,
            style_decisions: String::new(),
        });
    }
    Ok(rows)
}

/// Run every requested method on every requested split. The normalizer is
/// fitted on the bundle's training demos.
pub fn evaluate(
    bundle: &StyleBundle,
    settings: &Settings,
    splits: &[Split],
    methods: &[Method],
) -> Result<MetricReport> {
    settings.validate()?;
    let norm = Normalizer::fit(&bundle.demos)?;
    let mut policy = bundle.policy.clone();
    policy.clip_sample = settings.clip_sample;
    let mut rows = Vec::new();
    for &split in splits {
        let episodes = eval_scenes(settings, split, settings.eval.episodes)?;
        let (scenes, seeds): (Vec<Scene>, Vec<u64>) = episodes.into_iter().unzip();
        for &method in methods {
            match method {
                Method::BaseDp => {
                    let rs = policy.rollout_batch(&scenes, &seeds, &IdentitySelector, &settings.rollout)?;
                    rows.extend(rollout_rows(settings, &norm, split, method, &seeds, rs));
                }
                Method::Scdp => {
                    let selector = bundle.selector(&scenes, settings.ellipse)?;
                    let rs = policy.rollout_batch(&scenes, &seeds, &selector, &settings.rollout)?;
                    rows.extend(rollout_rows(settings, &norm, split, method, &seeds, rs));
                }
                Method::DatasetStats => rows.extend(dataset_rows(settings, &norm, &bundle.demos, split)?),
            }
        }
    }
    let summary = summarize(&rows);
    Ok(MetricReport { rows, summary })
}

/// SCDP rollouts through the public conditioned entry point, used by
/// `infer`.
pub fn infer(bundle: &StyleBundle, settings: &Settings, scene: &Scene, seed: u64) -> Result<Rollout> {
    scene.validate()?;
    let mut b = bundle.clone();
    b.policy.clip_sample = settings.clip_sample;
    let mut out = conditioned_rollout_batch(
        &b,
        std::slice::from_ref(scene),
        &[seed],
        &settings.ellipse,
        &settings.rollout,
    )?;
    Ok(out.pop().expect("one episode"))
}

pub fn rows_to_csv(rows: &[EpisodeRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ScdpError::Data(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| ScdpError::Data(format!("csv: {e}")))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<EpisodeRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ScdpError::Data(format!("csv: {e}")))
}

/// Write `episodes.csv` and `summary.json` into `dir`, each atomically.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(EPISODES_FILE), &rows_to_csv(&report.rows)?)?;
    let mut json = serde_json::to_vec_pretty(&report.summary)?;
    json.push(b'\n');
    write_atomic(&dir.join(SUMMARY_FILE), &json)?;
    Ok(())
}

//! Scenes, Bézier demonstrations, style subsets and JSONL persistence.

use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdpError};
use crate::geometry::Vec2;
use crate::metrics::{efficiency, EFFICIENCY_EPS};
use crate::observer::{self, EllipseConfig, ObserverConfig};
use crate::rng::SimRng;

/// Largest per-step displacement.
pub const A_MAX: f64 = 0.08;
/// Minimum distance from the start to any goal and between goals.
pub const REACH_MARGIN: f64 = 0.1;
pub const SAMPLING_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BlockReach,
    Navigation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::BlockReach => "block_reach",
            Task::Navigation => "navigation",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_reach" => Ok(Task::BlockReach),
            "navigation" => Ok(Task::Navigation),
            _ => Err(ScdpError::Argument(format!(
                "unknown task {s:?} (block_reach|navigation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityMode {
    Ambiguous,
    Clear,
    Any,
}

/// Motion style. `efficient` is accepted as an alias of `predictable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Legible,
    #[serde(alias = "efficient")]
    Predictable,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Legible, Style::Predictable];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Legible => "legible",
            Style::Predictable => "predictable",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Style {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legible" => Ok(Style::Legible),
            "predictable" | "efficient" => Ok(Style::Predictable),
            _ => Err(ScdpError::Argument(format!(
                "unknown style {s:?} (legible|predictable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: Task,
    pub start: Vec2,
    pub goal: Vec2,
    pub negatives: Vec<Vec2>,
}

impl Scene {
    /// Target first, then negatives.
    pub fn goals(&self) -> impl Iterator<Item = Vec2> + '_ {
        std::iter::once(self.goal).chain(self.negatives.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(ScdpError::Data("scene needs at least one negative goal".into()));
        }
        let points = std::iter::once(self.start).chain(self.goals());
        for p in points {
            if !p.is_finite() || !p.in_unit_square() {
                return Err(ScdpError::Data(format!(
                    "point [{}, {}] outside the unit workspace",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene: Scene,
    pub states: Vec<Vec2>,
    pub actions: Vec<Vec2>,
}

impl Trajectory {
    pub fn from_states(scene: Scene, states: Vec<Vec2>) -> Self {
        let actions = states.windows(2).map(|w| w[1] - w[0]).collect();
        Trajectory { scene, states, actions }
    }

    pub fn final_state(&self) -> Vec2 {
        *self.states.last().expect("trajectory has at least one state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleScores {
    pub legibility: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub trajectory: Trajectory,
    pub scores: StyleScores,
}

impl Demo {
    pub fn score(&self, style: Style) -> f64 {
        match style {
            Style::Legible => self.scores.legibility,
            Style::Predictable => self.scores.efficiency,
        }
    }
}

fn sample_point(task: Task, rng: &mut SimRng, is_start: bool) -> Vec2 {
    match (task, is_start) {
        (Task::BlockReach, true) => Vec2::new(rng.uniform_range(0.3, 0.7), rng.uniform_range(0.05, 0.2)),
        (Task::BlockReach, false) => Vec2::new(rng.uniform_range(0.1, 0.9), rng.uniform_range(0.45, 0.9)),
        (Task::Navigation, _) => Vec2::new(rng.uniform_range(0.05, 0.95), rng.uniform_range(0.05, 0.95)),
    }
}

/// Rejection-sample a scene with `n_negatives` distractors matching `mode`
/// under the ellipse detector evaluated at the start.
pub fn sample_scene(
    task: Task,
    rng: &mut SimRng,
    mode: AmbiguityMode,
    n_negatives: usize,
    ellipse: &EllipseConfig,
) -> Result<Scene> {
    if n_negatives == 0 {
        return Err(ScdpError::Argument("a scene needs at least one negative goal".into()));
    }
    for _ in 0..SAMPLING_BUDGET {
        let start = sample_point(task, rng, true);
        let goal = sample_point(task, rng, false);
        let negatives: Vec<Vec2> = (0..n_negatives).map(|_| sample_point(task, rng, false)).collect();
        let goals: Vec<Vec2> = std::iter::once(goal).chain(negatives.iter().copied()).collect();
        let separated = goals
            .iter()
            .enumerate()
            .all(|(i, g)| g.dist(start) > REACH_MARGIN && goals[..i].iter().all(|h| h.dist(*g) > REACH_MARGIN));
        if !separated {
            continue;
        }
        let scene = Scene {
            task,
            start,
            goal,
            negatives,
        };
        let ambiguous = observer::detect_ambiguity(&scene, start, ellipse)?;
        let accept = match mode {
            AmbiguityMode::Any => true,
            AmbiguityMode::Ambiguous => ambiguous,
            AmbiguityMode::Clear => !ambiguous,
        };
        if accept {
            return Ok(scene);
        }
    }
    Err(ScdpError::Sampling(format!(
        "no {mode:?} {task} scene found in {SAMPLING_BUDGET} attempts"
    )))
}

/// Quadratic Bézier `B(u) = (1−u)²s₀ + 2u(1−u)P₁ + u²g*`.
pub fn bezier_point(start: Vec2, control: Vec2, goal: Vec2, u: f64) -> Vec2 {
    let v = 1.0 - u;
    start * (v * v) + control * (2.0 * u * v) + goal * (u * u)
}

fn bezier_states(scene: &Scene, control: Vec2, steps: usize) -> Vec<Vec2> {
    let n = steps - 1;
    (0..=n)
        .map(|i| bezier_point(scene.start, control, scene.goal, i as f64 / n as f64))
        .collect()
}

/// Demonstration along a quadratic Bézier whose control point is the
/// start-goal midpoint shifted by `control_offset`. Adds states until every
/// step respects [`A_MAX`].
pub fn bezier_demo(scene: &Scene, control_offset: Vec2, steps: usize) -> Result<Trajectory> {
    if steps < 2 {
        return Err(ScdpError::Argument(format!(
            "bezier_demo needs at least 2 states, got {steps}"
        )));
    }
    let control = scene.start.lerp(scene.goal, 0.5) + control_offset;
    let mut steps = steps;
    loop {
        let states = bezier_states(scene, control, steps);
        let longest = states.windows(2).map(|w| w[0].dist(w[1])).fold(0.0, f64::max);
        if longest <= A_MAX {
            return Ok(Trajectory::from_states(scene.clone(), states));
        }
        let needed = ((steps - 1) as f64 * longest / A_MAX).ceil() as usize + 1;
        steps = needed.max(steps + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub steps: usize,
    pub offset_min: f64,
    pub offset_max: f64,
    pub negatives: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            steps: 48,
            offset_min: 0.0,
            offset_max: 0.35,
            negatives: 1,
        }
    }
}

pub fn score_demo(trajectory: Trajectory, observer: &ObserverConfig) -> Demo {
    let legibility = observer::legibility_score(&trajectory.states, &trajectory.scene, observer);
    let efficiency = efficiency(&trajectory.states, EFFICIENCY_EPS);
    Demo {
        trajectory,
        scores: StyleScores { legibility, efficiency },
    }
}

/// Demo `i` draws from its own generator seeded `master_seed + i`.
pub fn build_dataset(
    task: Task,
    n_demos: usize,
    master_seed: u64,
    data: &DataConfig,
    observer: &ObserverConfig,
    ellipse: &EllipseConfig,
) -> Result<Vec<Demo>> {
    if n_demos == 0 {
        return Err(ScdpError::Argument("n_demos must be ≥ 1".into()));
    }
    if !(0.0 <= data.offset_min && data.offset_min <= data.offset_max) {
        return Err(ScdpError::Argument("offset range must satisfy 0 ≤ min ≤ max".into()));
    }
    (0..n_demos)
        .map(|i| {
            let mut rng = SimRng::new(master_seed.wrapping_add(i as u64));
            let scene = sample_scene(task, &mut rng, AmbiguityMode::Any, data.negatives, ellipse)?;
            let magnitude = rng.uniform_range(data.offset_min, data.offset_max);
            let signed = if rng.coin() { magnitude } else { -magnitude };
            let dir = scene.goal - scene.start;
            let offset = dir.perp() * (signed / dir.norm());
            Ok(score_demo(bezier_demo(&scene, offset, data.steps)?, observer))
        })
        .collect()
}

/// How demos are ranked when selecting a style subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRanking {
    /// The stored score itself.
    Raw,
    /// The stored score compared against a straight line on the same scene:
    /// legibility gain and efficiency ratio.
    SceneRelative,
}

impl fmt::Display for SubsetRanking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsetRanking::Raw => "raw",
            SubsetRanking::SceneRelative => "relative",
        })
    }
}

impl std::str::FromStr for SubsetRanking {
    type Err = ScdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(SubsetRanking::Raw),
            "relative" | "scene_relative" => Ok(SubsetRanking::SceneRelative),
            _ => Err(ScdpError::Argument(format!(
                "unknown subset ranking {s:?} (raw|relative)"
            ))),
        }
    }
}

pub fn ranking_key(demo: &Demo, style: Style, ranking: SubsetRanking, observer: &ObserverConfig) -> f64 {
    let raw = demo.score(style);
    match ranking {
        SubsetRanking::Raw => raw,
        SubsetRanking::SceneRelative => {
            let scene = &demo.trajectory.scene;
            let line = observer::straight_line(scene.start, scene.goal, demo.trajectory.states.len());
            match style {
                Style::Legible => raw - observer::legibility_score(&line, scene, observer),
                Style::Predictable => raw / efficiency(&line, EFFICIENCY_EPS),
            }
        }
    }
}

/// Indices of the top `⌈fraction·n⌉` demos by key, ties to the lower index,
/// returned in input order.
pub fn select_top(keys: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if keys.is_empty() {
        return Err(ScdpError::Argument("cannot select a subset of an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ScdpError::Argument(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    let take = ((fraction * keys.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut chosen = order[..take.min(keys.len())].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn select_style_subset(
    demos: &[Demo],
    style: Style,
    fraction: f64,
    ranking: SubsetRanking,
    observer: &ObserverConfig,
) -> Result<Vec<usize>> {
    let keys: Vec<f64> = demos.iter().map(|d| ranking_key(d, style, ranking, observer)).collect();
    select_top(&keys, fraction)
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    task: Task,
    start: Vec2,
    goal_star: Vec2,
    goals_neg: Vec<Vec2>,
    states: Vec<Vec2>,
    actions: Vec<Vec2>,
    scores: StyleScores,
}

impl From<&Demo> for DemoRecord {
    fn from(d: &Demo) -> Self {
        let t = &d.trajectory;
        DemoRecord {
            task: t.scene.task,
            start: t.scene.start,
            goal_star: t.scene.goal,
            goals_neg: t.scene.negatives.clone(),
            states: t.states.clone(),
            actions: t.actions.clone(),
            scores: d.scores,
        }
    }
}

impl DemoRecord {
    fn into_demo(self) -> std::result::Result<Demo, String> {
        if self.states.is_empty() || self.actions.len() + 1 != self.states.len() {
            return Err(format!(
                "{} states but {} actions",
                self.states.len(),
                self.actions.len()
            ));
        }
        if self.goals_neg.is_empty() {
            return Err("no negative goals".into());
        }
        if !(self.scores.legibility.is_finite() && self.scores.efficiency > 0.0) {
            return Err("scores must be finite with positive efficiency".into());
        }
        Ok(Demo {
            trajectory: Trajectory {
                scene: Scene {
                    task: self.task,
                    start: self.start,
                    goal: self.goal_star,
                    negatives: self.goals_neg,
                },
                states: self.states,
                actions: self.actions,
            },
            scores: self.scores,
        })
    }
}

pub fn encode_dataset(demos: &[Demo]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in demos {
        serde_json::to_writer(&mut out, &DemoRecord::from(d))?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn dataset_save(demos: &[Demo], path: &Path) -> Result<()> {
    nncore::checkpoint::write_atomic(path, &encode_dataset(demos)?)?;
    Ok(())
}

pub fn dataset_load(path: &Path) -> Result<Vec<Demo>> {
    let file = std::fs::File::open(path)?;
    let mut demos = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ScdpError::DatasetLine {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let record: DemoRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        demos.push(record.into_demo().map_err(err)?);
    }
    Ok(demos)
}

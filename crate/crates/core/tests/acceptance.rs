//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 4 to 8 train the full-size pipeline through the `scdp` binary,
//! which takes roughly a quarter of an hour on one core.

use std::path::Path;
use std::time::Instant;

use nncore::gradcheck::DEFAULT_STEP;
use nncore::gradient_check;
use nncore::probes::{ActivationProbe, Conv1dProbe, FilmProbe, GroupNormProbe, LinearProbe, MlpProbe};
use scdp::eval::{Aggregate, Method, Split, SUMMARY_FILE};
use scdp::metrics::*;
use scdp::observer::*;
use scdp::policy::*;
use scdp::style::{sha256_hex, BundleManifest, StyleBundle, StylePredictor};
use scdp::world::{sample_scene, AmbiguityMode, Scene, Style, Task};
use scdp::{SimRng, Vec2};

mod common;
use common::{run_pipeline, PipelineRun, PipelineSizes, UNetProbe, TINY_CONFIG};

const GRAD_TOL: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn v(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = SimRng::new(2024);
    let mut u = rng.uniform_source();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut failures = 0;
    let mut note = |name: &str, r: nncore::GradReport| {
        if r.max_rel_error() > worst.0 {
            worst = (r.max_rel_error(), name.to_string());
        }
        if !r.passed() {
            failures += 1;
        }
    };
    for _ in 0..100 {
        note(
            "affine",
            gradient_check(&mut LinearProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
        note(
            "conv1d",
            gradient_check(&mut Conv1dProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
        note(
            "group_norm",
            gradient_check(&mut GroupNormProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
        note(
            "silu+upsample",
            gradient_check(&mut ActivationProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
        note(
            "film",
            gradient_check(&mut FilmProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
        note(
            "mlp",
            gradient_check(&mut MlpProbe::random(&mut u), DEFAULT_STEP, GRAD_TOL),
        );
    }
    for seed in 0..3 {
        note(
            "unet+port",
            gradient_check(&mut UNetProbe::new(seed), DEFAULT_STEP, GRAD_TOL),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures == 0 && secs < 120.0,
        format!(
            "{failures} failing checks, max rel error {:.2e} ({}), {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn forward_noise_moments() -> Verdict {
    let s = NoiseSchedule::new(100, ScheduleKind::SquaredCosine).unwrap();
    let x0 = -0.4;
    let n = 100_000;
    let mut rng = SimRng::new(99);
    let mut worst_z: f64 = 0.0;
    for k in [1, 25, 50, 75, 100] {
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = s.forward_noise(&[x0], k, &mut rng).0[0];
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = (sq - n as f64 * mean * mean) / (n - 1) as f64;
        let ab = s.alpha_bar(k);
        let want_var = 1.0 - ab;
        let z_mean = (mean - ab.sqrt() * x0).abs() / (want_var / n as f64).sqrt();
        let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    verdict(
        worst_z < 3.0,
        format!("largest deviation {worst_z:.2} SE over k in 1,25,50,75,100"),
    )
}

fn metric_oracles() -> Verdict {
    let mut rng = SimRng::new(5);
    let mut pt = || v(rng.uniform(), rng.uniform());
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs() / (1.0 + b.abs()));
    let obs = ObserverConfig::default();
    let ell = EllipseConfig::default();
    let tp = TransparencyParams::default();
    for _ in 0..200 {
        let states: Vec<Vec2> = (0..12).map(|_| pt()).collect();
        let neg = pt();
        let goal = pt();

        let mut d = 0.0;
        let mut len = 0.0;
        for t in 1..states.len() {
            d += ((neg.x - states[t].x).powi(2) + (neg.y - states[t].y).powi(2)).sqrt() / t as f64;
            len += ((states[t].x - states[t - 1].x).powi(2) + (states[t].y - states[t - 1].y).powi(2)).sqrt();
        }
        track(detachment(&states, neg), d);
        track(efficiency(&states, EFFICIENCY_EPS), 1.0 / (len + 1e-6));

        let j = pt().x * 1.5;
        let w = 1.0 / (1.0 + (-2.5 * (j - 0.5)).exp());
        track(w_amb(j, &tp), w);
        let (dh, eh) = (pt().x, pt().y);
        track(transparency(dh, eh, w), dh - w * dh + w * eh);

        let scene = Scene {
            task: Task::Navigation,
            start: states[0],
            goal,
            negatives: vec![neg],
        };
        let at = states[6];
        let cost = states[..=6].windows(2).map(|w| w[0].dist(w[1])).sum::<f64>();
        let score = |g: Vec2| (obs.lambda * (-cost - at.dist(g) + states[0].dist(g))).exp();
        let (sg, sn) = (score(goal), score(neg));
        let p = goal_posterior(&states[..=6], &scene, &obs);
        track(p[0], sg / (sg + sn));
        track(p[1], sn / (sg + sn));

        let e = ellipse_matrix(states[0], goal, &ell).unwrap();
        let axis = goal - states[0];
        let theta = axis.y.atan2(axis.x);
        let a = ell.kappa * axis.norm() / ell.eccentricity;
        let b = a * (1.0 - ell.eccentricity.powi(2)).sqrt();
        let c = states[0] + axis * ell.kappa;
        let q = pt();
        let (dx, dy) = (q.x - c.x, q.y - c.y);
        let along = dx * theta.cos() + dy * theta.sin();
        let across = -dx * theta.sin() + dy * theta.cos();
        track(e.quadratic_form(q), (along / a).powi(2) + (across / b).powi(2));
    }
    verdict(
        worst < 1e-9,
        format!("max relative deviation {worst:.2e} over 200 random cases"),
    )
}

fn aggregate<'a>(summary: &'a [Aggregate], split: Split, method: Method) -> &'a Aggregate {
    summary
        .iter()
        .find(|a| a.split == split && a.method == method)
        .expect("summary row")
}

fn untrained_predictor_matches_base(run: &PipelineRun) -> (bool, String) {
    let bundle = StyleBundle::load(&run.bundle).unwrap();
    let policy = &bundle.policy;
    let width = policy.net.config().bottleneck_width();
    let fresh = StylePredictor::new(
        Style::Legible,
        bundle.encoder.latent_width(),
        width,
        &Default::default(),
        &mut SimRng::new(1),
    );
    let ell = EllipseConfig::default();
    let mut srng = SimRng::new(4242);
    let scenes: Vec<Scene> = (0..8)
        .map(|_| sample_scene(Task::BlockReach, &mut srng, AmbiguityMode::Ambiguous, 1, &ell).unwrap())
        .collect();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let rows = fresh.film_rows(&bundle.encoder.encode(&refs).unwrap()).unwrap();
    let seeds: Vec<u64> = (0..8).collect();
    let rc = RolloutConfig::default();
    let base = policy.rollout_batch(&scenes, &seeds, &IdentitySelector, &rc).unwrap();
    let same = scenes.iter().enumerate().all(|(i, sc)| {
        let styled = policy
            .rollout(sc, seeds[i], &FixedSelector(rows[i].clone()), &rc)
            .unwrap();
        styled
            .trajectory
            .states
            .iter()
            .zip(&base[i].trajectory.states)
            .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits())
            && styled.trajectory.states.len() == base[i].trajectory.states.len()
    });
    (same, "identity predictor rollouts bit-identical on 8 scenes".into())
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

fn reproducible_pipeline(root: &Path) -> Verdict {
    std::fs::create_dir_all(root).unwrap();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let sizes = PipelineSizes {
        demos: 40,
        base_epochs: 3,
        scenes: 300,
        encoder_epochs: 3,
        style_epochs: 2,
        episodes: 10,
    };
    let a = run_pipeline(&root.join("a"), Some(&cfg), &sizes);
    let b = run_pipeline(&root.join("b"), Some(&cfg), &sizes);
    let mut files = vec![
        (a.dataset.clone(), b.dataset.clone()),
        (a.base.clone(), b.base.clone()),
        (a.encoder.clone(), b.encoder.clone()),
        (a.eval.join("episodes.csv"), b.eval.join("episodes.csv")),
        (a.eval.join(SUMMARY_FILE), b.eval.join(SUMMARY_FILE)),
    ];
    let manifest = BundleManifest::load(&a.bundle).unwrap();
    for r in manifest.predictors.values() {
        files.push((a.bundle.join(&r.path), b.bundle.join(&r.path)));
    }
    let differing: Vec<String> = files
        .iter()
        .filter(|(x, y)| !same_bytes(x, y))
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    )
}

fn ambiguity_anchors() -> Verdict {
    let obs = ObserverConfig::default();
    let ell = EllipseConfig::default();
    let (s0, g) = (v(0.2, 0.3), v(0.8, 0.6));
    let mk = |n: Vec2| Scene {
        task: Task::Navigation,
        start: s0,
        goal: g,
        negatives: vec![n],
    };
    let mid = mk(s0.lerp(g, 0.5));
    let mid_ok = probabilistic_ambiguity(&mid, &obs, 48) && detect_ambiguity(&mid, s0, &ell).unwrap();

    let a = ellipse_matrix(s0, g, &ell).unwrap().a;
    let axis = (g - s0) * (1.0 / s0.dist(g));
    // Points past the goal stay ambiguous to the posterior observer at any
    // distance, since the efficient path to g* also heads toward them.
    let far_points = [
        s0.lerp(g, 0.5) + axis.perp() * (2.2 * a),
        s0 - axis * (2.1 * a),
        s0.lerp(g, 0.2) - axis.perp() * (2.5 * a),
        s0.lerp(g, 0.9) + axis.perp() * (3.0 * a),
    ];
    let far_ok = far_points.iter().all(|&n| {
        let sc = mk(n);
        !probabilistic_ambiguity(&sc, &obs, 48) && !detect_ambiguity(&sc, s0, &ell).unwrap()
    });

    let mut rng = SimRng::new(17);
    let mut worst: f64 = 0.0;
    let mut flips = 0;
    for _ in 0..1000 {
        let mut p = || v(rng.uniform(), rng.uniform());
        let (s, goal, n) = (p(), p(), p());
        if s.dist(goal) < 1e-3 {
            continue;
        }
        let angle = 6.3 * rng.uniform() - 3.15;
        let shift = v(4.0 * rng.uniform() - 2.0, 4.0 * rng.uniform() - 2.0);
        let t = |q: Vec2| q.rotate(angle) + shift;
        let q0 = ellipse_matrix(s, goal, &ell).unwrap().quadratic_form(n);
        let q1 = ellipse_matrix(t(s), t(goal), &ell).unwrap().quadratic_form(t(n));
        worst = worst.max((q0 - q1).abs() / (1.0 + q0.abs()));
        if (q0 - 1.0).abs() > 1e-9 && (q0 <= 1.0) != (q1 <= 1.0) {
            flips += 1;
        }
    }
    verdict(
        mid_ok && far_ok && worst < 1e-9 && flips == 0,
        format!("midpoint ambiguous {mid_ok}, far unambiguous {far_ok}, rigid max dev {worst:.1e}, flips {flips}"),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |id: u32, name: &'static str, v: Verdict| {
        println!(
            "{} criterion {id:2} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v));
    };

    report(1, "gradient checks", gradients());
    report(2, "forward noise moments", forward_noise_moments());
    report(3, "metric oracles", metric_oracles());

    let started = Instant::now();
    let full = PipelineSizes {
        demos: 200,
        base_epochs: 100,
        scenes: 5000,
        encoder_epochs: 50,
        style_epochs: 300,
        episodes: 100,
    };
    let run = run_pipeline(&root.path().join("full"), None, &full);
    println!(
        "      full pipeline finished in {:.0}s",
        started.elapsed().as_secs_f64()
    );
    let summary: Vec<Aggregate> = serde_json::from_slice(&std::fs::read(run.eval.join(SUMMARY_FILE)).unwrap()).unwrap();
    let get = |split, method| aggregate(&summary, split, method);

    let base_clear = get(Split::Clear, Method::BaseDp);
    report(
        4,
        "base policy success",
        verdict(
            base_clear.success_rate >= 0.95,
            format!(
                "success {:.2} over {} clear episodes",
                base_clear.success_rate, base_clear.episodes
            ),
        ),
    );

    let (ab, asc) = (
        get(Split::Ambiguous, Method::BaseDp),
        get(Split::Ambiguous, Method::Scdp),
    );
    let (cb, csc) = (get(Split::Clear, Method::BaseDp), get(Split::Clear, Method::Scdp));
    report(
        5,
        "style effect per split",
        verdict(
            asc.d.mean > ab.d.mean && csc.e.mean > cb.e.mean,
            format!(
                "ambiguous D {:.4} vs {:.4}, clear E {:.4} vs {:.4} (scdp vs base)",
                asc.d.mean, ab.d.mean, csc.e.mean, cb.e.mean
            ),
        ),
    );
    report(
        6,
        "transparency gain",
        verdict(
            asc.t.mean > ab.t.mean && csc.t.mean > cb.t.mean,
            format!(
                "T ambiguous {:.4} vs {:.4}, clear {:.4} vs {:.4} (scdp vs base)",
                asc.t.mean, ab.t.mean, csc.t.mean, cb.t.mean
            ),
        ),
    );

    let manifest = BundleManifest::load(&run.bundle).unwrap();
    let bundled = sha256_hex(&std::fs::read(run.bundle.join(&manifest.base.path)).unwrap());
    let hash_ok = bundled == run.base_sha_after_training && manifest.base.sha256 == bundled;
    let (ident_ok, ident_note) = untrained_predictor_matches_base(&run);
    report(
        7,
        "frozen base",
        verdict(
            hash_ok && ident_ok,
            format!("base sha256 unchanged {hash_ok}; {ident_note}: {ident_ok}"),
        ),
    );

    let rmse: Option<f64> = run
        .encoder_log
        .lines()
        .find_map(|l| l.strip_prefix("held-out reconstruction rmse "))
        .and_then(|v| v.trim().parse().ok());
    report(
        8,
        "encoder reconstruction",
        verdict(rmse.is_some_and(|r| r < 0.02), format!("held-out rmse {rmse:?}")),
    );

    report(9, "ambiguity anchors", ambiguity_anchors());
    report(
        10,
        "bit-identical reruns",
        reproducible_pipeline(&root.path().join("repro")),
    );

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

use nncore::gradcheck::{relative_error, DEFAULT_STEP};
use nncore::{gradient_check, Adam, AdamConfig, GradCheckable, Module, Tensor};
use proptest::prelude::*;
use scdp::policy::train::{epoch_rows, mse_and_grad, noisy_batch};
use scdp::policy::*;
use scdp::world::{bezier_demo, score_demo, Demo, Scene, Task};
use scdp::{SimRng, Vec2};

mod common;
use common::UNetProbe;

fn small_config(k: usize) -> PolicyConfig {
    PolicyConfig {
        k,
        horizons: Horizons { to: 2, tp: 4, ta: 2 },
        channels: vec![8, 16],
        kernel: 3,
        mid_blocks: 1,
        step_embed: 8,
        groups: 4,
    }
}

fn scene(start: Vec2, goal: Vec2) -> Scene {
    Scene {
        task: Task::Navigation,
        start,
        goal,
        negatives: vec![Vec2::new(0.9, 0.1)],
    }
}

#[test]
fn schedule_shape() {
    let one = NoiseSchedule::new(1, ScheduleKind::SquaredCosine).unwrap();
    assert_eq!(one.coefficients(1).sigma, 0.0);
    let s = NoiseSchedule::new(100, ScheduleKind::SquaredCosine).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(100) < 1e-3);
    assert!((1..=100).all(|k| s.beta(k) <= 0.999));
    assert!(NoiseSchedule::new(0, ScheduleKind::SquaredCosine).is_err());

    let x0 = [0.3, -1.2, 2.0];
    for k in [1, 50, 100] {
        assert_eq!(
            s.noised(&x0, k, &[0.0; 3]),
            x0.iter().map(|x| s.alpha_bar(k).sqrt() * x).collect::<Vec<_>>()
        );
    }
}

#[test]
fn posterior_weights_agree_with_epsilon_form() {
    let s = NoiseSchedule::new(100, ScheduleKind::SquaredCosine).unwrap();
    for k in [1, 2, 37, 99, 100] {
        let c = s.coefficients(k);
        let (w0, wk) = s.posterior_weights(k);
        let ab = s.alpha_bar(k);
        for (x, e) in [(0.4, -0.7), (-2.0, 1.3)] {
            let eps_form = c.scale * (x - c.eps_coef * e);
            let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let x0_form = w0 * x0 + wk * x;
            assert!((eps_form - x0_form).abs() < 1e-9 * (1.0 + eps_form.abs()), "k={k}");
        }
    }
}

#[test]
fn forward_noise_moments_match_the_closed_form() {
    let s = NoiseSchedule::new(100, ScheduleKind::SquaredCosine).unwrap();
    let x0 = 0.7;
    let n = 100_000;
    let mut rng = SimRng::new(2024);
    for k in [1, 10, 50, 90, 100] {
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let (x, _) = s.forward_noise(&[x0], k, &mut rng);
            sum += x[0];
            sq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = (sq - n as f64 * mean * mean) / (n - 1) as f64;
        let ab = s.alpha_bar(k);
        let (want_mean, want_var) = (ab.sqrt() * x0, 1.0 - ab);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "k={k} mean {mean} vs {want_mean}"
        );
        assert!((var - want_var).abs() < 3.0 * se_var, "k={k} var {var} vs {want_var}");
    }
}

#[test]
fn identical_straight_demos_are_learned() {
    let sc = scene(Vec2::new(0.2, 0.2), Vec2::new(0.7, 0.5));
    let demo = score_demo(bezier_demo(&sc, Vec2::ZERO, 12).unwrap(), &Default::default());
    let demos: Vec<Demo> = vec![demo; 8];
    let cfg = PolicyConfig {
        channels: vec![16, 32],
        step_embed: 16,
        ..small_config(20)
    };
    let norm = ActionNorm::fit(&demos, cfg.horizons.tp).unwrap();
    let mut policy = Policy::new(cfg, norm, 1).unwrap();
    let before = policy.to_bytes().unwrap();
    let train = TrainConfig {
        batch: 32,
        lr: 3e-3,
        windows_per_demo: 8,
    };
    let empty = train_base(&mut policy, &demos, 0, &train, &mut SimRng::new(2)).unwrap();
    assert!(empty.is_empty());
    assert_eq!(policy.to_bytes().unwrap(), before);

    let curve = train_base(&mut policy, &demos, 300, &train, &mut SimRng::new(2)).unwrap();
    assert_eq!(curve.len(), 300);
    assert!(curve.iter().all(|l| l.is_finite()));
    let head: f64 = curve[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = curve[297..].iter().sum::<f64>() / 3.0;
    assert!(tail < 0.1 * head, "loss {head} -> {tail}");
}

#[test]
fn single_step_with_zero_noise_prediction_rescales_the_draw() {
    let mut policy = Policy::new(small_config(1), ActionNorm::identity(), 5).unwrap();
    policy.clip_sample = false;
    for p in policy.net.params_mut() {
        if p.name.starts_with("final.out") {
            p.value.fill(0.0);
        }
    }
    let scale = policy.schedule.coefficients(1).scale;
    let obs = vec![0.1f32; 6];
    let actions = policy.sample_actions(&obs, &mut SimRng::new(77), None).unwrap();
    let mut r = SimRng::new(77);
    for a in actions {
        let (x, y) = (r.normal(), r.normal());
        assert!(
            (a.x - x * scale).abs() < 1e-12 && (a.y - y * scale).abs() < 1e-12,
            "{a:?}"
        );
    }
}

#[test]
fn identity_port_matches_no_port_bitwise() {
    let policy = Policy::new(small_config(10), ActionNorm::identity(), 9).unwrap();
    let width = policy.net.config().bottleneck_width();
    let obs = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let mut a = vec![SimRng::new(1), SimRng::new(2), SimRng::new(3)];
    let mut b = a.clone();
    let plain = policy.sample_actions_batch(&obs, &mut a, None).unwrap();
    let port = FilmPort::identity(width);
    let ident = policy.sample_actions_batch(&obs, &mut b, Some(&port)).unwrap();
    assert_eq!(plain, ident);
}

#[test]
fn unbounded_clip_agrees_with_epsilon_update() {
    let mut policy = Policy::new(small_config(10), ActionNorm::identity(), 4).unwrap();
    let obs = vec![0.2f32; 6];
    let clipped = policy.sample_actions(&obs, &mut SimRng::new(8), None).unwrap();
    policy.clip_sample = false;
    let plain = policy.sample_actions(&obs, &mut SimRng::new(8), None).unwrap();
    for (a, b) in clipped.iter().zip(&plain) {
        assert!(a.dist(*b) < 1e-9 * (1.0 + b.norm()), "{a:?} vs {b:?}");
    }
}

/// Every window carries the same target, so a trained sampler should land on it.
#[test]
fn constant_targets_are_recovered_by_sampling() {
    let cfg = small_config(20);
    let norm = ActionNorm {
        bound: 1.0,
        ..ActionNorm::identity()
    };
    let mut policy = Policy::new(cfg.clone(), norm, 3).unwrap();
    let target = [0.5, -0.25];
    let windows: Vec<Window> = (0..16)
        .map(|i| Window {
            demo: i,
            obs: vec![0.0; cfg.obs_dim()],
            actions: target.iter().copied().cycle().take(cfg.horizons.tp * 2).collect(),
        })
        .collect();
    let mut rng = SimRng::new(6);
    let mut adam = Adam::new(AdamConfig::with_lr(3e-3));
    for _ in 0..400 {
        let rows = epoch_rows(&windows, windows.len(), 4, &mut rng);
        let batch = noisy_batch(&windows, &rows, &policy.schedule, cfg.horizons.tp, &mut rng).unwrap();
        let (pred, cache) = policy.net.forward(&batch.x, &batch.steps, &batch.obs, None).unwrap();
        let (_, grad) = mse_and_grad(&pred, &batch.eps).unwrap();
        policy.net.zero_grad();
        policy.net.backward(cache, &grad, BackwardScope::Full).unwrap();
        adam.step(&mut policy.net.params_mut()).unwrap();
    }
    let obs = vec![0.0f32; cfg.obs_dim()];
    let mut mean = [0.0; 2];
    let draws = 40;
    for seed in 0..draws {
        for a in policy.sample_actions(&obs, &mut SimRng::new(seed), None).unwrap() {
            mean[0] += a.x;
            mean[1] += a.y;
        }
    }
    let n = (draws as usize * cfg.horizons.tp) as f64;
    for j in 0..2 {
        assert!((mean[j] / n - target[j]).abs() < 0.05, "{:?}", mean.map(|m| m / n));
    }
}

#[test]
fn starting_on_the_goal_ends_immediately() {
    let policy = Policy::new(small_config(5), ActionNorm::identity(), 0).unwrap();
    let p = Vec2::new(0.4, 0.6);
    let r = policy
        .rollout(&scene(p, p), 1, &IdentitySelector, &RolloutConfig::default())
        .unwrap();
    assert!(r.success);
    assert_eq!(r.trajectory.states, vec![p]);
    assert!(r.trajectory.actions.is_empty());
}

#[test]
fn rollouts_are_reproducible_and_batch_independent() {
    let demos: Vec<Demo> = [(0.1, 0.8), (0.9, 0.7), (0.5, 0.95)]
        .iter()
        .map(|&(x, y)| {
            let sc = scene(Vec2::new(0.5, 0.1), Vec2::new(x, y));
            score_demo(bezier_demo(&sc, Vec2::ZERO, 14).unwrap(), &Default::default())
        })
        .collect();
    let cfg = small_config(8);
    let norm = ActionNorm::fit(&demos, cfg.horizons.tp).unwrap();
    let policy = Policy::new(cfg, norm, 12).unwrap();
    let scenes: Vec<Scene> = demos.iter().map(|d| d.trajectory.scene.clone()).collect();
    let rc = RolloutConfig {
        max_steps: 20,
        ..Default::default()
    };
    let seeds = [31, 32, 33];
    let batch = policy.rollout_batch(&scenes, &seeds, &IdentitySelector, &rc).unwrap();
    let again = policy.rollout_batch(&scenes, &seeds, &IdentitySelector, &rc).unwrap();
    assert_eq!(batch, again);
    for (i, sc) in scenes.iter().enumerate() {
        let single = policy.rollout(sc, seeds[i], &IdentitySelector, &rc).unwrap();
        assert_eq!(single, batch[i]);
        let t = &single.trajectory;
        assert!(t.states.len() <= rc.max_steps + 1);
        assert!(t.actions.iter().all(|a| a.norm() <= rc.a_max + 1e-12));
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut policy = Policy::new(small_config(6), ActionNorm::identity(), 21).unwrap();
    policy.norm = ActionNorm {
        mean: [0.01, -0.02],
        std: [0.03, 0.04],
        bound: 3.5,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    policy.save(&path).unwrap();
    let back = Policy::load(&path).unwrap();
    assert_eq!(back.config, policy.config);
    assert_eq!(back.norm, policy.norm);
    assert_eq!(back.schedule.alpha_bars(), policy.schedule.alpha_bars());
    assert_eq!(back.to_bytes().unwrap(), policy.to_bytes().unwrap());
}

#[test]
fn unet_gradients_match_finite_differences() {
    let mut probe = UNetProbe::new(3);
    let report = gradient_check(&mut probe, DEFAULT_STEP, 1e-4);
    assert!(
        report.passed(),
        "{:#?}",
        report
            .entries
            .iter()
            .filter(|e| e.max_rel_error >= 1e-4)
            .collect::<Vec<_>>()
    );
}

#[test]
fn bottleneck_scope_gives_the_same_port_gradient_and_no_encoder_gradient() {
    let mut probe = UNetProbe::new(8);
    let (_, full) = probe.loss_and_grads();
    let n = probe.net.params().len();
    let (_, cache) = probe
        .net
        .forward(&probe.x, &probe.steps, &probe.obs, Some(&probe.port))
        .unwrap();
    probe.net.zero_grad();
    let g = probe
        .net
        .backward(cache, &probe.r, BackwardScope::ToBottleneck)
        .unwrap();
    assert!(g.obs.is_none() && g.input.is_none());
    let (dg, db) = g.port.unwrap();
    for (a, b) in dg
        .data()
        .iter()
        .zip(full[n].data())
        .chain(db.data().iter().zip(full[n + 1].data()))
    {
        assert!(relative_error(*a, *b) < 1e-12);
    }
    for p in probe.net.params() {
        if p.name.starts_with("down") || p.name.starts_with("mid") || p.name.starts_with("step_mlp") {
            assert!(
                p.grad.data().iter().all(|&v| v == 0.0),
                "{} received a gradient",
                p.name
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampled_plans_have_the_prediction_horizon(seed in 0u64..1000, batch in 1usize..4) {
        let policy = Policy::new(small_config(3), ActionNorm::identity(), seed).unwrap();
        let obs = Tensor::from_vec(&[batch, 6], vec![0.1; batch * 6]).unwrap();
        let mut rngs: Vec<SimRng> = (0..batch as u64).map(|i| SimRng::new(seed + i)).collect();
        let out = policy.sample_actions_batch(&obs, &mut rngs, None).unwrap();
        prop_assert_eq!(out.len(), batch);
        prop_assert!(out.iter().all(|r| r.len() == 4 && r.iter().all(|a| a.x.is_finite() && a.y.is_finite())));
    }
}

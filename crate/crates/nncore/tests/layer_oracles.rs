//! Forward passes against brute-force oracles, gradient checks, and the
//! checkpoint/freeze invariants.

use nncore::checkpoint::{self, AnyTensor};
use nncore::gradcheck::{gradient_check, DEFAULT_STEP};
use nncore::layers::{film_modulate, Conv1d, Linear};
use nncore::probes::{ActivationProbe, Conv1dProbe, FilmProbe, GroupNormProbe, LinearProbe, MlpProbe};
use nncore::{Adam, AdamConfig, Module, Tensor};
use proptest::prelude::*;
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn uniform_source(seed: u64) -> impl FnMut() -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    move || (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn random_tensor(shape: &[usize], u: &mut impl FnMut() -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| 2.0 * u() - 1.0).collect()).unwrap()
}

// --- affine -----------------------------------------------------------------

#[test]
fn affine_identity_and_zero_weight_cases() {
    let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let lin = Linear::from_parts("id", eye, Tensor::zeros(&[2])).unwrap();
    let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
    assert_eq!(lin.forward(&x).unwrap().0.data(), &[3.0, -1.0]);

    let lin = Linear::from_parts(
        "zero",
        Tensor::zeros(&[2, 2]),
        Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap(),
    )
    .unwrap();
    let x = Tensor::from_vec(&[2], vec![17.0, -4.0]).unwrap();
    assert_eq!(lin.forward(&x).unwrap().0.data(), &[0.5, 0.5]);
}

#[test]
fn affine_matches_matrix_oracle() {
    let mut u = uniform_source(11);
    let w = random_tensor(&[3, 2], &mut u);
    let b = random_tensor(&[3], &mut u);
    let x = random_tensor(&[4, 2], &mut u);
    let lin = Linear::from_parts("l", w.clone(), b.clone()).unwrap();
    let y = lin.forward(&x).unwrap().0;
    assert_eq!(y.shape(), &[4, 3]);
    for r in 0..4 {
        for o in 0..3 {
            let mut acc = b.data()[o];
            for i in 0..2 {
                acc += w.data()[o * 2 + i] * x.data()[r * 2 + i];
            }
            assert!((y.data()[r * 3 + o] - acc).abs() < 1e-9);
        }
    }
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let mut u = uniform_source(1);
    let lin = Linear::<f64>::new("l", 3, 2, &mut u);
    let err = lin.forward(&Tensor::zeros(&[4, 2])).unwrap_err().to_string();
    assert!(err.contains("[4, 2]") && err.contains("[2, 3]"), "{err}");
}

proptest! {
    #[test]
    fn affine_is_linear_up_to_bias(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut u = uniform_source(seed);
        let lin = Linear::<f64>::new("l", 4, 3, &mut u);
        let x = random_tensor(&[2, 4], &mut u);
        let y = random_tensor(&[2, 4], &mut u);
        let combo = Tensor::from_vec(&[2, 4], x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let f = |t: &Tensor<f64>| lin.forward(t).unwrap().0;
        let (fc, fx, fy) = (f(&combo), f(&x), f(&y));
        let bias = lin.bias.value.data();
        for i in 0..fc.len() {
            let b = bias[i % 3];
            let expected = alpha * (fx.data()[i] - b) + beta * (fy.data()[i] - b) + b;
            prop_assert!((fc.data()[i] - expected).abs() < 1e-9);
        }
    }
}

// --- conv1d -----------------------------------------------------------------

fn conv_oracle(w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (c_out, c_in, k) = (w.dim(0), w.dim(1), w.dim(2));
    let (batch, t_in) = (x.dim(0), x.dim(2));
    let pad = (k / 2) as isize;
    let t_out = (t_in + 2 * (k / 2) - k) / stride + 1;
    let mut out = vec![0.0; batch * c_out * t_out];
    for n in 0..batch {
        for o in 0..c_out {
            for t in 0..t_out {
                let mut acc = b.data()[o];
                for i in 0..c_in {
                    for j in 0..k {
                        let pos = (t * stride) as isize + j as isize - pad;
                        if pos >= 0 && (pos as usize) < t_in {
                            acc += w.data()[(o * c_in + i) * k + j] * x.data()[(n * c_in + i) * t_in + pos as usize];
                        }
                    }
                }
                out[(n * c_out + o) * t_out + t] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut u = uniform_source(3);
    let x = random_tensor(&[2, 1, 7], &mut u);
    let id = Conv1d::from_parts(
        "c",
        Tensor::from_vec(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
        Tensor::zeros(&[1]),
        1,
    )
    .unwrap();
    assert_eq!(id.forward(&x).unwrap().0, x);
    let zero = Conv1d::from_parts("c", Tensor::zeros(&[1, 1, 3]), Tensor::zeros(&[1]), 1).unwrap();
    assert!(zero.forward(&x).unwrap().0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut u = uniform_source(5);
    for (stride, k) in [(1, 3), (1, 5), (2, 3), (1, 1)] {
        let w = random_tensor(&[4, 3, k], &mut u);
        let b = random_tensor(&[4], &mut u);
        let x = random_tensor(&[2, 3, 8], &mut u);
        let conv = Conv1d::from_parts("c", w.clone(), b.clone(), stride).unwrap();
        let y = conv.forward(&x).unwrap().0;
        let oracle = conv_oracle(&w, &b, &x, stride);
        let diff = y
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "stride {stride} k {k}: {diff}");
    }
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut u = uniform_source(2);
    let conv = Conv1d::<f64>::new("c", 3, 2, 3, 1, &mut u);
    assert!(conv.forward(&Tensor::zeros(&[1, 2, 5])).is_err());
}

// --- FiLM -------------------------------------------------------------------

#[test]
fn film_identity_and_constant_cases() {
    let mut u = uniform_source(8);
    let h = random_tensor(&[2, 3, 4], &mut u);
    let ones = Tensor::full(&[3], 1.0);
    let zeros = Tensor::zeros(&[3]);
    assert_eq!(film_modulate(&h, &ones, &zeros).unwrap(), h);

    let b = Tensor::from_vec(&[3], vec![0.1, -2.0, 5.0]).unwrap();
    let y = film_modulate(&h, &zeros, &b).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[(i / 4) % 3]);
    }
}

#[test]
fn film_matches_elementwise_oracle_exactly() {
    let mut u = uniform_source(9);
    let h = random_tensor(&[2, 3, 4], &mut u);
    let g = random_tensor(&[2, 3], &mut u);
    let b = random_tensor(&[2, 3], &mut u);
    let y = film_modulate(&h, &g, &b).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for t in 0..4 {
                let i = (n * 3 + c) * 4 + t;
                assert_eq!(y.data()[i], g.data()[n * 3 + c] * h.data()[i] + b.data()[n * 3 + c]);
            }
        }
    }
}

#[test]
fn film_rejects_non_broadcastable_shapes() {
    let h = Tensor::<f64>::zeros(&[2, 3, 4]);
    assert!(film_modulate(&h, &Tensor::zeros(&[4]), &Tensor::zeros(&[4])).is_err());
    assert!(film_modulate(&h, &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 3])).is_err());
    assert!(film_modulate(&h, &Tensor::zeros(&[3]), &Tensor::zeros(&[2, 3])).is_err());
}

proptest! {
    #[test]
    fn film_identity_on_any_tensor(seed in 0u64..10_000, b in 1usize..4, c in 1usize..6, t in 1usize..5) {
        let mut u = uniform_source(seed);
        let h = random_tensor(&[b, c, t], &mut u);
        let y = film_modulate(&h, &Tensor::full(&[b, c], 1.0), &Tensor::zeros(&[b, c])).unwrap();
        prop_assert_eq!(y, h);
    }
}

// --- gradients --------------------------------------------------------------

const TOL: f64 = 1e-4;

#[test]
fn every_layer_passes_finite_differences_over_100_configs() {
    let mut u = uniform_source(2024);
    for i in 0..100 {
        let reports = [
            (
                "affine",
                gradient_check(&mut LinearProbe::random(&mut u), DEFAULT_STEP, TOL),
            ),
            (
                "conv1d",
                gradient_check(&mut Conv1dProbe::random(&mut u), DEFAULT_STEP, TOL),
            ),
            (
                "group_norm",
                gradient_check(&mut GroupNormProbe::random(&mut u), DEFAULT_STEP, TOL),
            ),
            (
                "silu+upsample",
                gradient_check(&mut ActivationProbe::random(&mut u), DEFAULT_STEP, TOL),
            ),
            (
                "film",
                gradient_check(&mut FilmProbe::random(&mut u), DEFAULT_STEP, TOL),
            ),
            ("mlp", gradient_check(&mut MlpProbe::random(&mut u), DEFAULT_STEP, TOL)),
        ];
        for (name, r) in reports {
            assert!(r.passed(), "config {i} {name}: {:?}", r.entries);
        }
    }
}

// --- Adam + freeze ----------------------------------------------------------

#[test]
fn frozen_layer_survives_100_adam_steps_bit_identical() {
    let mut u = uniform_source(77);
    let mut frozen = Linear::<f32>::new("frozen", 3, 3, &mut u);
    let mut live = Linear::<f32>::new("live", 3, 3, &mut u);
    frozen.freeze();
    let before = frozen.named_tensors();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    let x = Tensor::from_vec(&[2, 3], vec![0.1f32, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
    for _ in 0..100 {
        frozen.zero_grad();
        live.zero_grad();
        let (h, c1) = frozen.forward(&x).unwrap();
        let (y, c2) = live.forward(&h).unwrap();
        let dh = live.backward(c2, &y).unwrap();
        frozen.backward(c1, &dh).unwrap();
        let mut params = frozen.params_mut();
        params.extend(live.params_mut());
        adam.step(&mut params).unwrap();
    }
    for ((_, a), (_, b)) in before.iter().zip(frozen.named_tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(
        frozen.weight.grad.data().iter().all(|&g| g == 0.0),
        "frozen grads untouched"
    );
}

// --- checkpoints ------------------------------------------------------------

#[test]
fn three_random_tensors_round_trip_bit_exact_through_a_file() {
    let mut u = uniform_source(42);
    let tensors = vec![
        ("w".to_string(), AnyTensor::F64(random_tensor(&[3, 4], &mut u))),
        ("b".to_string(), AnyTensor::F32(random_tensor(&[4], &mut u).cast())),
        ("s".to_string(), AnyTensor::F64(random_tensor(&[2, 1, 3], &mut u))),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    checkpoint::save(&tensors, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.len(), 3);
    for ((na, a), (nb, b)) in tensors.iter().zip(&loaded) {
        assert_eq!(na, nb);
        assert!(a.bit_eq(b));
    }
    assert_eq!(checkpoint::encode(&loaded).unwrap(), bytes);
}

fn any_tensor() -> impl Strategy<Value = AnyTensor> {
    let shape = prop::collection::vec(1usize..4, 0..4);
    (shape, any::<bool>(), any::<u64>()).prop_map(|(shape, f64_, seed)| {
        let n: usize = shape.iter().product();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        if f64_ {
            let data = (0..n).map(|_| f64::from_bits(rng.next_u64())).collect();
            AnyTensor::F64(Tensor::from_vec(&shape, data).unwrap())
        } else {
            let data = (0..n).map(|_| f32::from_bits(rng.next_u32())).collect();
            AnyTensor::F32(Tensor::from_vec(&shape, data).unwrap())
        }
    })
}

proptest! {
    #[test]
    fn checkpoint_encoding_round_trips_bitwise(tensors in prop::collection::vec(any_tensor(), 0..5)) {
        let named: Vec<(String, AnyTensor)> = tensors.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
        let decoded = checkpoint::decode(&checkpoint::encode(&named).unwrap()).unwrap();
        prop_assert_eq!(decoded.len(), named.len());
        for ((na, a), (nb, b)) in named.iter().zip(&decoded) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.bit_eq(b));
        }
    }
}

//! Autodiff engine: forward oracles, adjoint checks and tape invariants.

use ccdc_core::tensor::{grad_check, GradCheckOptions};
use ccdc_core::{Error, Parameters, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            c.set(&[i, j], s);
        }
    }
    c
}

fn conv3d_oracle(x: &Tensor, k: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (cin, h, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kl, kd) = (k.shape()[0], k.shape()[2], k.shape()[3], k.shape()[4]);
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ol = (l + 2 * pad[1] - kl) / stride[1] + 1;
    let od = (d + 2 * pad[2] - kd) / stride[2] + 1;
    let mut out = Tensor::zeros(&[cout, oh, ol, od]);
    for co in 0..cout {
        for a in 0..oh {
            for b in 0..ol {
                for c in 0..od {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kl {
                                for w in 0..kd {
                                    let i0 = (a * stride[0] + u) as isize - pad[0] as isize;
                                    let i1 = (b * stride[1] + v) as isize - pad[1] as isize;
                                    let i2 = (c * stride[2] + w) as isize - pad[2] as isize;
                                    if i0 < 0
                                        || i1 < 0
                                        || i2 < 0
                                        || i0 >= h as isize
                                        || i1 >= l as isize
                                        || i2 >= d as isize
                                    {
                                        continue;
                                    }
                                    s +=
                                        k.get(&[co, ci, u, v, w]) * x.get(&[ci, i0 as usize, i1 as usize, i2 as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, a, b, c], s);
                }
            }
        }
    }
    out
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn matmul_identity_zero_and_oracle() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(a.matmul(&eye).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let zero = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(a.matmul(&zero).unwrap().value().data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = (random(&[4, 3], &mut rng), random(&[3, 2], &mut rng));
    let got = tape
        .constant(x.clone())
        .matmul(&tape.constant(y.clone()))
        .unwrap()
        .value();
    close(&got, &matmul_oracle(&x, &y), 1e-14);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn large_matmul_matches_oracle_in_parallel_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = (random(&[70, 80], &mut rng), random(&[80, 60], &mut rng));
    let tape = Tape::new();
    let got = tape
        .constant(x.clone())
        .matmul(&tape.constant(y.clone()))
        .unwrap()
        .value();
    close(&got, &matmul_oracle(&x, &y), 1e-13);
}

#[test]
fn conv3d_zero_input_overlap_counts_and_loop_oracle() {
    let tape = Tape::new();
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let zero = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(zero
        .conv3d(&k, [1; 3], [1; 3])
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let ones = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
    let out = ones.conv3d(&k, [1; 3], [1; 3]).unwrap().value();
    assert_eq!(out.shape(), &[1, 3, 3, 3]);
    assert_eq!(out.get(&[0, 1, 1, 1]), 27.0);
    assert_eq!(out.get(&[0, 0, 0, 0]), 8.0);
    assert_eq!(out.get(&[0, 2, 2, 2]), 8.0);
    assert_eq!(out.get(&[0, 1, 0, 0]), 12.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 1, 2], [0, 1, 1])] {
        let x = random(&[2, 5, 4, 5], &mut rng);
        let kk = random(&[3, 2, 3, 2, 3], &mut rng);
        let got = tape
            .constant(x.clone())
            .conv3d(&tape.constant(kk.clone()), stride, pad)
            .unwrap()
            .value();
        close(&got, &conv3d_oracle(&x, &kk, stride, pad), 1e-13);
    }
}

#[test]
fn conv3d_rejects_non_integer_output_extent() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 5, 5, 5]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    assert!(matches!(x.conv3d(&k, [2, 2, 2], [0, 0, 0]), Err(Error::Config(_))));
}

#[test]
fn conv3d_with_full_stride_degenerates_to_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let x = tape.constant(random(&[1, 4, 2, 3], &mut rng));
    let k = tape.constant(random(&[6, 1, 4, 2, 3], &mut rng));
    let out = x.conv3d(&k, [4, 2, 3], [0, 0, 0]).unwrap();
    assert_eq!(out.shape(), vec![6, 1, 1, 1]);
}

#[test]
fn small_closed_forms() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::vector(vec![0.3, 0.3, 0.3]));
    for v in logits.softmax().unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let c = tape.constant(Tensor::vector(vec![2.5; 6]));
    assert!(c.layer_norm().unwrap().value().data().iter().all(|&v| v == 0.0));
    let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let n = v.l2_normalize().unwrap().value();
    assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn domain_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    let y = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    assert!(matches!(y.div(&x), Err(Error::Domain { op: "div", .. })));
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let loss = x.mul(&x).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap().item(), 6.0);

    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]), true);
    let unused = tape.leaf(Tensor::zeros(&[2]), true);
    let loss = a.sum().unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(&unused).is_none());

    let not_scalar = a.add_scalar(1.0).unwrap();
    assert!(matches!(tape.backward(&not_scalar), Err(Error::Usage(_))));
}

#[test]
fn repeated_backward_accumulates_and_sum_of_losses_is_linear() {
    let mut params = Parameters::new();
    params.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
    let grads_of = |which: u8, params: &mut Parameters| {
        let tape = Tape::new();
        let w = tape.param(params, "w").unwrap();
        let l1 = w.mul(&w).unwrap().sum().unwrap();
        let l2 = w.exp().unwrap().sum().unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => l1.add(&l2).unwrap(),
        };
        tape.backward(&loss).unwrap().accumulate_into(params);
    };
    let mut separate = params.clone();
    grads_of(1, &mut separate);
    grads_of(2, &mut separate);
    let mut joint = params.clone();
    grads_of(3, &mut joint);
    let s = separate.get("w").unwrap().grad.clone().unwrap();
    let j = joint.get("w").unwrap().grad.clone().unwrap();
    close(&s, &j, 1e-15);

    joint.zero_grad();
    assert!(joint.get("w").unwrap().grad.is_none());
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let a = tape.leaf(random(&[3, 4], &mut rng), true);
    let b = tape.leaf(random(&[4, 5], &mut rng), true);
    let y = a
        .matmul(&b)
        .unwrap()
        .gelu()
        .unwrap()
        .layer_norm()
        .unwrap()
        .softmax()
        .unwrap();
    let _ = y.sum().unwrap();
    let replayed = tape.replay().unwrap();
    assert_eq!(replayed, tape.recorded_values());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let a = tape.constant(random(&[8, 8], &mut rng));
        let b = tape.constant(random(&[8, 8], &mut rng));
        a.matmul(&b).unwrap().softmax().unwrap().value()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

type Build = for<'t> fn(&'t Tape, &Parameters) -> ccdc_core::Result<Var<'t>>;

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights
/// so that no adjoint is masked by symmetric cancellation.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> ccdc_core::Result<Var<'t>> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.4);
    y.mul(&tape.constant(w))?.sum()
}

fn check_op(name: &str, inputs: &[(&str, Tensor)], build: Build) {
    let mut params = Parameters::new();
    for (n, t) in inputs {
        params.insert(*n, t.clone());
    }
    let opts = GradCheckOptions {
        step: 1e-5,
        max_coords_per_param: 200,
        seed: 1,
    };
    let report = grad_check(&params, build, &opts).unwrap();
    assert!(
        report.max_rel_error < 1e-5,
        "{name}: max relative error {} ({:?})",
        report.max_rel_error,
        report.params
    );
}

#[test]
fn every_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m34 = random(&[3, 4], &mut rng);
    let m34b = random(&[3, 4], &mut rng);
    let v4 = random(&[4], &mut rng);
    let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.5..2.0));
    let away_from_zero = Tensor::from_fn(&[3, 4], |_| {
        let v: f64 = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });

    macro_rules! op {
        ($name:expr, [$($n:expr => $t:expr),*], |$tape:ident, $p:ident| $body:expr) => {{
            fn build<'t>($tape: &'t Tape, $p: &Parameters) -> ccdc_core::Result<Var<'t>> {
                let y = $body;
                weighted_sum($tape, y)
            }
            check_op($name, &[$(($n, $t.clone())),*], build);
        }};
    }

    op!("add", ["a" => m34, "b" => v4], |t, p| t.param(p, "a")?.add(&t.param(p, "b")?)?);
    op!("sub", ["a" => m34, "b" => m34b], |t, p| t.param(p, "a")?.sub(&t.param(p, "b")?)?);
    op!("mul", ["a" => m34, "b" => v4], |t, p| t.param(p, "a")?.mul(&t.param(p, "b")?)?);
    op!("div", ["a" => m34, "b" => pos], |t, p| t.param(p, "a")?.div(&t.param(p, "b")?)?);
    op!("exp", ["a" => m34], |t, p| t.param(p, "a")?.exp()?);
    op!("log", ["a" => pos], |t, p| t.param(p, "a")?.log()?);
    op!("relu", ["a" => away_from_zero], |t, p| t.param(p, "a")?.relu()?);
    op!("gelu", ["a" => m34], |t, p| t.param(p, "a")?.gelu()?);
    op!("sigmoid", ["a" => m34], |t, p| t.param(p, "a")?.sigmoid()?);
    op!("neg_scale", ["a" => m34], |t, p| t.param(p, "a")?.neg()?.scale(2.5)?.add_scalar(1.0)?);
    op!("clamp", ["a" => away_from_zero], |t, p| t.param(p, "a")?.clamp(-0.1, 0.1)?.add(&t.param(p, "a")?)?);
    op!("reshape", ["a" => m34], |t, p| t.param(p, "a")?.reshape(&[2, 6])?);
    op!("transpose", ["a" => m34], |t, p| t.param(p, "a")?.transpose()?);
    op!("permute", ["a" => Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin())],
        |t, p| t.param(p, "a")?.permute(&[2, 0, 1])?);
    op!("concat", ["a" => m34, "b" => m34b], |t, p| Var::concat(&[t.param(p, "a")?, t.param(p, "b")?], 1)?);
    op!("slice", ["a" => m34], |t, p| t.param(p, "a")?.slice(1, 1, 3)?);
    op!("gather", ["a" => m34], |t, p| t.param(p, "a")?.gather(&[0, 5, 5, 11])?);
    op!("sum_mean", ["a" => m34], |t, p| t.param(p, "a")?.mean()?.add(&t.param(p, "a")?.sum()?.scale(0.3)?)?);
    op!("mean_axis", ["a" => m34], |t, p| t.param(p, "a")?.mean_axis(0)?);
    op!("sum_axis", ["a" => m34], |t, p| t.param(p, "a")?.sum_axis(1)?);
    op!("matmul", ["a" => m34, "b" => Tensor::from_fn(&[4, 2], |i| (i as f64).cos())],
        |t, p| t.param(p, "a")?.matmul(&t.param(p, "b")?)?);
    op!("inner_product", ["a" => v4, "b" => Tensor::vector(vec![0.3, -0.2, 0.9, 0.1])],
        |t, p| t.param(p, "a")?.inner_product(&t.param(p, "b")?)?);
    op!("softmax", ["a" => m34], |t, p| t.param(p, "a")?.softmax()?);
    op!("logsumexp", ["a" => m34], |t, p| t.param(p, "a")?.logsumexp()?);
    op!("layer_norm", ["a" => m34], |t, p| t.param(p, "a")?.layer_norm()?);
    op!("l2_normalize", ["a" => m34], |t, p| t.param(p, "a")?.l2_normalize()?);
    op!("conv3d", ["x" => Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64 * 0.71).sin()),
                   "k" => Tensor::from_fn(&[2, 2, 3, 3, 3], |i| (i as f64 * 1.3).cos() * 0.5)],
        |t, p| t.param(p, "x")?.conv3d(&t.param(p, "k")?, [1, 1, 1], [1, 1, 1])?);
    op!("dynamic_contract", ["x" => Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.9).sin()),
                             "w" => Tensor::from_fn(&[2, 3, 2, 4], |i| (i as f64 * 0.4).cos())],
        |t, p| t.param(p, "x")?.dynamic_contract(&t.param(p, "w")?)?);
}

#[test]
fn quadratic_grad_check_is_near_exact() {
    let mut params = Parameters::new();
    params.insert("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]));
    let report = grad_check(
        &params,
        |t, p| {
            let x = t.param(p, "x")?;
            x.mul(&x)?.sum()
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn corrupted_adjoint_is_detected() {
    let mut params = Parameters::new();
    params.insert("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]));
    let report = grad_check(
        &params,
        |t, p| {
            t.corrupt_adjoint("gelu", 1.5);
            t.param(p, "x")?.gelu()?.sum()
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{}", report.max_rel_error);
}

#[test]
fn non_finite_loss_is_reported_with_coordinate() {
    let mut params = Parameters::new();
    params.insert("x", Tensor::vector(vec![1.0, 709.78271]));
    let report = grad_check(
        &params,
        |t, p| t.param(p, "x")?.exp()?.sum(),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed(1e-4));
    assert!(report.non_finite.is_some() || report.max_rel_error.is_infinite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
        let tape = Tape::new();
        let got = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        let want = matmul_oracle(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            prop_assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoints_hold_at_random_small_shapes(r in 1usize..4, c in 2usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        params.insert("a", random(&[r, c], &mut rng));
        params.insert("b", random(&[c, r], &mut rng));
        let report = grad_check(&params, |t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let y = a.layer_norm()?.gelu()?.matmul(&b)?.softmax()?;
            weighted_sum(t, y)
        }, &GradCheckOptions::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }
}

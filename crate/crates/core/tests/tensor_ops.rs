mod common;

use common::gradcheck::{self, random_tensor};
use distillkit::tensor::{bicubic_resize, catmull_rom};
use distillkit::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run<F: FnOnce(&mut Tape) -> distillkit::Var>(f: F) -> Vec<f32> {
    let mut tape = Tape::new();
    let out = f(&mut tape);
    tape.data(out).to_vec()
}

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let out = run(|tp| {
        let a = tp.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tp.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        tp.matmul(a, b).unwrap()
    });
    assert_eq!(out, vec![3., 4., 5., 6.]);
    let out = run(|tp| {
        let a = tp.constant(t(&[1, 2], &[1., 2.]));
        let b = tp.constant(t(&[2, 1], &[3., 4.]));
        tp.matmul(a, b).unwrap()
    });
    assert_eq!(out, vec![11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&[5, 7], &mut rng);
    let b = random_tensor(&[7, 3], &mut rng);
    let mut expected = vec![0.0f64; 15];
    for i in 0..5 {
        for j in 0..3 {
            for p in 0..7 {
                expected[i * 3 + j] += a.data()[i * 7 + p] as f64 * b.data()[p * 3 + j] as f64;
            }
        }
    }
    let out = run(|tp| {
        let (va, vb) = (tp.constant(a.clone()), tp.constant(b.clone()));
        tp.matmul(va, vb).unwrap()
    });
    for (o, e) in out.iter().zip(&expected) {
        assert!((*o as f64 - e).abs() <= 1e-6, "{o} vs {e}");
    }
}

fn layer_norm(x: Tensor, d: usize) -> Vec<f32> {
    run(|tp| {
        let x = tp.constant(x);
        let g = tp.constant(Tensor::ones([d]));
        let b = tp.constant(Tensor::zeros([d]));
        tp.layer_norm(x, g, b, 1e-5).unwrap()
    })
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm(t(&[3], &[1., 1., 1.]), 3), vec![0., 0., 0.]);
    let pair = layer_norm(t(&[2], &[-1., 1.]), 2);
    assert!((pair[0] + 1.0).abs() < 1e-4 && (pair[1] - 1.0).abs() < 1e-4, "{pair:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[4, 16], &mut rng);
    let out = layer_norm(x, 16);
    for row in out.chunks(16) {
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-5, "{mean}");
        assert!((var.sqrt() - 1.0).abs() <= 1e-3, "{var}");
    }
}

#[test]
fn layer_norm_rejects_nonpositive_eps() {
    let mut tp = Tape::new();
    let x = tp.constant(Tensor::ones([2, 3]));
    let g = tp.constant(Tensor::ones([3]));
    let b = tp.constant(Tensor::zeros([3]));
    assert!(matches!(tp.layer_norm(x, g, b, 0.0), Err(distillkit::Error::Parameter(_))));
}

#[test]
fn gelu_examples() {
    let out = run(|tp| {
        let x = tp.constant(Tensor::from_vec(vec![0.0, 6.0, -6.0]));
        tp.gelu(x)
    });
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 6.0).abs() < 1e-3);
    assert!(out[2].abs() < 1e-3);
}

#[test]
fn softmax_examples() {
    let out = run(|tp| {
        let x = tp.constant(Tensor::zeros([3]));
        tp.softmax(x, 0).unwrap()
    });
    for v in out {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[3, 5], &mut rng);
    let out = run(|tp| {
        let x = tp.constant(x.scale_for_test(4.0));
        tp.softmax(x, 1).unwrap()
    });
    for row in out.chunks(5) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }
}

trait ScaleForTest {
    fn scale_for_test(&self, c: f32) -> Tensor;
}

impl ScaleForTest for Tensor {
    fn scale_for_test(&self, c: f32) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| v * c).collect()).unwrap()
    }
}

fn cosine(p: Tensor, q: Tensor) -> f32 {
    run(|tp| {
        let (p, q) = (tp.constant(p), tp.constant(q));
        tp.cosine_loss(p, q, 1e-8).unwrap()
    })[0]
}

#[test]
fn cosine_loss_examples() {
    let v = t(&[1, 3], &[0.5, -2.0, 1.0]);
    assert!(cosine(v.clone(), v.clone()).abs() < 1e-6);
    assert!((cosine(v.clone(), v.scale_for_test(-1.0)) - 2.0).abs() < 1e-6);
    assert!((cosine(t(&[1, 2], &[1., 0.]), t(&[1, 2], &[0., 1.])) - 1.0).abs() < 1e-7);
    // Zero rows are handled by the epsilon clamp.
    assert_eq!(cosine(Tensor::zeros([1, 2]), t(&[1, 2], &[0., 1.])), 1.0);
}

fn smooth_l1(p: f32, q: f32) -> f32 {
    run(|tp| {
        let (p, q) = (tp.constant(Tensor::from_vec(vec![p])), tp.constant(Tensor::from_vec(vec![q])));
        tp.smooth_l1_loss(p, q, 1.0).unwrap()
    })[0]
}

#[test]
fn smooth_l1_examples() {
    assert_eq!(smooth_l1(0.3, 0.3), 0.0);
    assert!((smooth_l1(0.5, 0.0) - 0.125).abs() < 1e-7);
    assert!((smooth_l1(2.0, 0.0) - 1.5).abs() < 1e-7);
    let mut tp = Tape::new();
    let p = tp.constant(Tensor::from_vec(vec![1.0]));
    assert!(tp.smooth_l1_loss(p, p, 0.0).is_err());
}

#[test]
fn smooth_l1_is_c1_at_transition() {
    let beta = 1.0f32;
    let grad_at = |e: f32| {
        let mut tp = Tape::new();
        let p = tp.param(Tensor::from_vec(vec![e]));
        let q = tp.constant(Tensor::from_vec(vec![0.0]));
        let l = tp.smooth_l1_loss(p, q, beta).unwrap();
        tp.backward(l).unwrap();
        (tp.item(l), tp.grad(p).unwrap()[0])
    };
    let (v_lo, g_lo) = grad_at(beta - 1e-4);
    let (v_hi, g_hi) = grad_at(beta + 1e-4);
    assert!((v_hi - v_lo).abs() < 3e-4, "value jump {v_lo} {v_hi}");
    assert!((g_hi - g_lo).abs() < 3e-4, "slope jump {g_lo} {g_hi}");
}

/// Direct 2-D kernel sum in f64 with edge clamping.
fn bicubic_oracle(grid: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let mut out = vec![0.0f64; oh * ow * d];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            for ky in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                for kx in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                    let wgt = catmull_rom(sy - ky as f64) * catmull_rom(sx - kx as f64);
                    let iy = ky.clamp(0, h as i64 - 1) as usize;
                    let ix = kx.clamp(0, w as i64 - 1) as usize;
                    for c in 0..d {
                        out[(oy * ow + ox) * d + c] += wgt * grid.data()[(iy * w + ix) * d + c] as f64;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn bicubic_matches_kernel_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = random_tensor(&[4, 4, 2], &mut rng);
    let out = bicubic_resize(&grid, 7, 7).unwrap();
    let expected = bicubic_oracle(&grid, 7, 7);
    for (o, e) in out.data().iter().zip(&expected) {
        assert!((*o as f64 - e).abs() <= 1e-5, "{o} vs {e}");
    }
    // The tape op runs the same kernel.
    let mut tp = Tape::new();
    let g = tp.constant(grid.clone());
    let r = tp.bicubic_resize(g, 7, 7).unwrap();
    assert_eq!(tp.data(r), out.data());
}

#[test]
fn bicubic_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = random_tensor(&[3, 5, 4], &mut rng);
    let mut tp = Tape::new();
    let g = tp.constant(grid.clone());
    let same = tp.bicubic_resize(g, 3, 5).unwrap();
    assert!(tp.value(same).max_abs_diff(&grid) <= 1e-6);

    let c = Tensor::full([4, 3, 2], 0.731);
    for (oh, ow) in [(1, 1), (2, 9), (8, 8), (13, 5)] {
        let out = bicubic_resize(&c, oh, ow).unwrap();
        assert_eq!(out.shape(), &[oh, ow, 2]);
        assert!(out.data().iter().all(|v| (v - 0.731).abs() <= 1e-5));
    }
    assert!(bicubic_resize(&Tensor::zeros([1, 3, 2]), 4, 4).is_err());
}

#[test]
fn finite_difference_agreement_on_ten_seeds() {
    for case in gradcheck::all_ops() {
        for seed in 0..10 {
            let err = gradcheck::max_relative_error(&case, seed);
            assert!(err <= gradcheck::TOLERANCE, "{} seed {seed}: relative error {err}", case.name);
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let grads = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tp = Tape::new();
        let x = tp.param(random_tensor(&[6, 12], &mut rng));
        let w = tp.param(random_tensor(&[12, 12], &mut rng));
        let h = tp.matmul(x, w).unwrap();
        let a = tp.attention(h, 2, 3, 2).unwrap();
        let s = tp.gelu(a);
        let l = tp.mean(s);
        tp.backward(l).unwrap();
        (tp.grad(x).unwrap().to_vec(), tp.grad(w).unwrap().to_vec())
    };
    let (a, b) = (grads(), grads());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn cosine_loss_is_scale_invariant(
        data in proptest::collection::vec(-3.0f32..3.0, 12),
        other in proptest::collection::vec(-3.0f32..3.0, 12),
        scales in proptest::collection::vec(0.05f32..20.0, 3),
    ) {
        let p = t(&[3, 4], &data);
        let q = t(&[3, 4], &other);
        prop_assume!(p.data().chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-2));
        prop_assume!(q.data().chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-2));
        let scaled = Tensor::new(vec![3, 4], data.iter().enumerate().map(|(i, v)| v * scales[i / 4]).collect()).unwrap();
        prop_assert!(cosine(p.clone(), p.clone()).abs() <= 1e-5);
        prop_assert!((cosine(p.clone(), q.clone()) - cosine(scaled.clone(), q.clone())).abs() <= 1e-5);
        prop_assert!((cosine(q.clone(), p.clone()) - cosine(q, scaled)).abs() <= 1e-5);
    }

    #[test]
    fn outputs_stay_finite(data in proptest::collection::vec(-50.0f32..50.0, 24)) {
        let x = t(&[4, 6], &data);
        let mut tp = Tape::new();
        let v = tp.param(x);
        let g = tp.constant(Tensor::ones([6]));
        let b = tp.constant(Tensor::zeros([6]));
        let n = tp.layer_norm(v, g, b, 1e-5).unwrap();
        let s = tp.softmax(n, 1).unwrap();
        let a = tp.gelu(v);
        let l1 = tp.mean(s);
        let l2 = tp.mean(a);
        let l = tp.add(l1, l2).unwrap();
        tp.backward(l).unwrap();
        prop_assert!(tp.value(s).all_finite() && tp.value(a).all_finite());
        prop_assert!(tp.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}

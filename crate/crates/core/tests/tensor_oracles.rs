mod common;

use common::{end_to_end_gradient_error, fd_check, primitives};
use leuq_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_passes_finite_differences() {
    for (i, prim) in primitives().iter().enumerate() {
        let err = fd_check(prim, 100, 1000 + i as u64);
        assert!(err < 1e-4, "{}: relative error {err:.3e}", prim.name);
    }
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let err = end_to_end_gradient_error(60, false, |_| true);
    assert!(err < 1e-3, "relative error {err:.3e}");
    let err = end_to_end_gradient_error(60, true, |name| !name.starts_with("encoder."));
    assert!(err < 1e-3, "relative error with consistency {err:.3e}");
}

/// Direct seven-loop cross-correlation.
fn conv_loop(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += x[((n * ci + c) * h + y as usize) * wd + xx as usize]
                                    * w[((o * ci + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[((n * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    (out, [b, co, ho, wo])
}

fn data(seed: u64, n: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_matches_loop_oracle(
        b in 1usize..3, ci in 1usize..4, co in 1usize..4, k in 1usize..5,
        extra in 0usize..5, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let h = k + extra;
        prop_assume!((h + 2 * pad - k) % stride == 0);
        let xs = [b, ci, h, h];
        let ws = [co, ci, k, k];
        let x = data(seed, xs.iter().product());
        let w = data(seed + 1, ws.iter().product());
        let (want, shape) = conv_loop(&x, xs, &w, ws, stride, pad);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(xs.to_vec(), x).unwrap());
        let wv = g.constant(Tensor::new(ws.to_vec(), w).unwrap());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y), &shape[..]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ whenever the transposed shape reproduces x.
    #[test]
    fn conv_transpose_is_the_adjoint(
        ci in 1usize..4, co in 1usize..4, stride in 1usize..3, seed in 0u64..1000,
    ) {
        let (k, pad) = if stride == 2 { (4, 1) } else { (3, 1) };
        let h = 8;
        let xs = [2, ci, h, h];
        let ws = [co, ci, k, k];
        let x = data(seed, xs.iter().product());
        let w = data(seed + 7, ws.iter().product());
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(xs.to_vec(), x.clone()).unwrap());
        let wv = g.constant(Tensor::new(ws.to_vec(), w).unwrap());
        let cx = g.conv2d(xv, wv, stride, pad).unwrap();
        let ys = g.shape(cx).to_vec();
        let y = data(seed + 3, ys.iter().product());
        let yv = g.constant(Tensor::new(ys, y.clone()).unwrap());
        let ty = g.conv_transpose2d(yv, wv, stride, pad).unwrap();
        prop_assert_eq!(g.shape(ty), &xs[..]);
        let lhs: f64 = g.value(cx).data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn group_norm_matches_two_pass_oracle(
        b in 1usize..3, groups in 1usize..4, per in 1usize..3, hw in 1usize..5, seed in 0u64..1000,
    ) {
        let c = groups * per;
        let plane = hw * hw;
        let x = data(seed, b * c * plane);
        let gamma = data(seed + 1, c);
        let beta = data(seed + 2, c);
        let eps = 1e-5;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![b, c, hw, hw], x.clone()).unwrap());
        let gv = g.constant(Tensor::new(vec![c], gamma.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![c], beta.clone()).unwrap());
        let y = g.group_norm(xv, groups, gv, bv, eps).unwrap();
        let out = g.value(y).data();
        let len = per * plane;
        for n in 0..b {
            for gi in 0..groups {
                let start = (n * c + gi * per) * plane;
                let chunk = &x[start..start + len];
                let mean = chunk.iter().sum::<f64>() / len as f64;
                let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                for (i, v) in chunk.iter().enumerate() {
                    let ch = gi * per + i / plane;
                    let want = (v - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
                    prop_assert!((out[start + i] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_naive_product(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let a = data(seed, m * k);
        let bm = data(seed + 1, k * n);
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![k, n], bm.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * bm[t * n + j]).sum();
                prop_assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x), vec![1.0, 2.0, 3.0]);
}

//! Finite-difference gradient checks.
//!
//! Each primitive is paired with an independent naive f64 reference. The
//! numeric derivative is a fourth-order central difference (h = 1e-3) of that
//! reference,
//! so the oracle shares no code with the tensor implementation.

use atmv_tensor::{Real, Rng, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-3;
#[cfg(not(feature = "f64"))]
const TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
const TOL: f64 = 1e-6;
/// Bound for the matmul and softmax examples.
#[cfg(not(feature = "f64"))]
const TIGHT: f64 = 1e-4;
#[cfg(feature = "f64")]
const TIGHT: f64 = 1e-6;

type RefFn = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

struct Case {
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
}

impl Case {
    fn random(rng: &mut Rng, shapes: &[&[usize]]) -> Self {
        let inputs = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                // round through Real so reference and tensor see identical values
                let v = (0..n).map(|_| rng.normal() as Real as f64).collect();
                (v, s.to_vec())
            })
            .collect();
        Case { inputs }
    }

    /// Max relative error of analytic vs numeric gradient over all inputs.
    fn max_rel_err(
        &self,
        weights_seed: u64,
        op: impl Fn(&[Tensor]) -> Tensor,
        reference: &RefFn,
    ) -> f64 {
        let params: Vec<Tensor> = self
            .inputs
            .iter()
            .map(|(v, s)| Tensor::param(v.iter().map(|&x| x as Real).collect(), s).unwrap())
            .collect();
        let out = op(&params);
        let mut wr = Rng::new(weights_seed);
        let w: Vec<f64> = (0..out.numel()).map(|_| wr.normal() as Real as f64).collect();
        let wt = Tensor::new(w.iter().map(|&x| x as Real).collect(), out.shape()).unwrap();
        out.mul(&wt).unwrap().sum().unwrap().backward().unwrap();

        let loss = |xs: &[Vec<f64>]| -> f64 {
            reference(xs).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut worst: f64 = 0.0;
        let mut xs: Vec<Vec<f64>> = self.inputs.iter().map(|(v, _)| v.clone()).collect();
        for (i, p) in params.iter().enumerate() {
            let analytic = p.grad().unwrap();
            for j in 0..xs[i].len() {
                let orig = xs[i][j];
                let mut at = |d: f64| {
                    xs[i][j] = orig + d;
                    let v = loss(&xs);
                    xs[i][j] = orig;
                    v
                };
                // fourth-order central stencil: truncation O(h^4)
                let numeric =
                    (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
                let err = (analytic[j] as f64 - numeric).abs() / numeric.abs().max(1e-8);
                worst = worst.max(err);
            }
        }
        worst
    }
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn ref_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Direct quadruple loop, same-padding cross-correlation of one image.
fn ref_conv(x: &[f64], k: &[f64], cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let sy = y as isize + ki as isize - (kh / 2) as isize;
                            let sx = xx as isize + kj as isize - (kw / 2) as isize;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += x[(ci * h + sy as usize) * w + sx as usize]
                                    * k[((co * cin + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
                out[(co * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn ref_normalize(x: &[f64], seg: usize, gamma: &[f64], beta: &[f64], ch: impl Fn(usize) -> usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for s in 0..x.len() / seg {
        let c = &x[s * seg..(s + 1) * seg];
        let mean = c.iter().sum::<f64>() / seg as f64;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / seg as f64;
        for j in 0..seg {
            let k = s * seg + j;
            y[k] = (x[k] - mean) / (var + 1e-5).sqrt() * gamma[ch(k)] + beta[ch(k)];
        }
    }
    y
}

#[test]
fn matmul_gradient() {
    let mut rng = Rng::new(11);
    let case = Case::random(&mut rng, &[&[3, 4], &[4, 2]]);
    let err = case.max_rel_err(1, |p| p[0].matmul(&p[1]).unwrap(), &|x| ref_matmul(&x[0], &x[1], 3, 4, 2));
    assert!(err < TIGHT, "matmul rel err {err}");
}

#[test]
fn batched_matmul_nt_gradient() {
    let mut rng = Rng::new(12);
    let case = Case::random(&mut rng, &[&[2, 3, 4], &[2, 5, 4]]);
    let err = case.max_rel_err(
        2,
        |p| p[0].matmul_nt(&p[1]).unwrap(),
        &|x| {
            let mut out = Vec::new();
            for b in 0..2 {
                let a = &x[0][b * 12..(b + 1) * 12];
                let bt: Vec<f64> = (0..20).map(|i| x[1][b * 20 + (i % 5) * 4 + i / 5]).collect();
                out.extend(ref_matmul(a, &bt, 3, 4, 5));
            }
            out
        },
    );
    assert!(err < TOL, "matmul_nt rel err {err}");
}

#[test]
fn softmax_gradient() {
    let mut rng = Rng::new(13);
    let case = Case::random(&mut rng, &[&[4]]);
    let err = case.max_rel_err(3, |p| p[0].softmax(0).unwrap(), &|x| ref_softmax(&x[0]));
    assert!(err < TIGHT, "softmax rel err {err}");
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = Rng::new(14);
    let case = Case::random(&mut rng, &[&[2, 5, 5], &[3, 2, 3, 3]]);
    let x = Tensor::new(case.inputs[0].0.iter().map(|&v| v as Real).collect(), &[2, 5, 5]).unwrap();
    let k = Tensor::new(case.inputs[1].0.iter().map(|&v| v as Real).collect(), &[3, 2, 3, 3]).unwrap();
    let got = x.conv2d(&k, None).unwrap();
    let want = ref_conv(&case.inputs[0].0, &case.inputs[1].0, 2, 5, 5, 3, 3, 3);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-6 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn conv2d_gradient_with_bias_and_batch() {
    let mut rng = Rng::new(15);
    let case = Case::random(&mut rng, &[&[2, 2, 4, 5], &[3, 2, 3, 1], &[3]]);
    let err = case.max_rel_err(
        4,
        |p| p[0].conv2d(&p[1], Some(&p[2])).unwrap(),
        &|x| {
            let mut out = Vec::new();
            for n in 0..2 {
                let mut y = ref_conv(&x[0][n * 40..(n + 1) * 40], &x[1], 2, 4, 5, 3, 3, 1);
                for (i, v) in y.iter_mut().enumerate() {
                    *v += x[2][i / 20];
                }
                out.extend(y);
            }
            out
        },
    );
    assert!(err < TOL, "conv2d rel err {err}");
}

#[test]
fn group_norm_gradient() {
    let mut rng = Rng::new(16);
    let case = Case::random(&mut rng, &[&[2, 4, 3], &[4], &[4]]);
    let err = case.max_rel_err(
        5,
        |p| p[0].group_norm(2, &p[1], &p[2], 1e-5).unwrap(),
        &|x| ref_normalize(&x[0], 6, &x[1], &x[2], |k| (k / 6) % 2 * 2 + (k % 6) / 3),
    );
    assert!(err < TOL, "group_norm rel err {err}");
}

#[test]
fn layer_norm_gradient() {
    let mut rng = Rng::new(17);
    let case = Case::random(&mut rng, &[&[3, 5], &[5], &[5]]);
    let err = case.max_rel_err(
        6,
        |p| p[0].layer_norm(&p[1], &p[2], 1e-5).unwrap(),
        &|x| ref_normalize(&x[0], 5, &x[1], &x[2], |k| k % 5),
    );
    assert!(err < TOL, "layer_norm rel err {err}");
}

#[test]
fn silu_and_broadcast_gradients() {
    let mut rng = Rng::new(18);
    let case = Case::random(&mut rng, &[&[2, 3, 2], &[2, 3], &[2]]);
    let err = case.max_rel_err(
        7,
        |p| {
            p[0].add_leading(&p[1])
                .unwrap()
                .add_trailing(&p[2])
                .unwrap()
                .silu()
                .unwrap()
        },
        &|x| {
            (0..12)
                .map(|i| {
                    let v = x[0][i] + x[1][i / 2] + x[2][i % 2];
                    v / (1.0 + (-v).exp())
                })
                .collect()
        },
    );
    assert!(err < TOL, "silu/broadcast rel err {err}");
}

#[test]
fn shape_ops_gradients() {
    let mut rng = Rng::new(19);
    let case = Case::random(&mut rng, &[&[2, 3], &[2, 1]]);
    let err = case.max_rel_err(
        8,
        |p| {
            let c = Tensor::concat(&[&p[0], &p[1]], 1).unwrap(); // [2, 4]
            let t = c.permute(&[1, 0]).unwrap(); // [4, 2]
            let r = t.narrow(0, 1, 3).unwrap().repeat_rows(2).unwrap(); // [6, 2]
            r.mul(&r).unwrap()
        },
        &|x| {
            let c = |i: usize, j: usize| if j < 3 { x[0][i * 3 + j] } else { x[1][i] };
            let mut out = Vec::new();
            for row in 1..4 {
                for _ in 0..2 {
                    for col in 0..2 {
                        out.push(c(col, row).powi(2));
                    }
                }
            }
            out
        },
    );
    assert!(err < TOL, "shape ops rel err {err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = Rng::new(20);
    let x = Tensor::param(rng.normal_vec(6), &[2, 3]).unwrap();
    let w = Tensor::param(rng.normal_vec(12), &[3, 4]).unwrap();
    let grads = |alpha: Real, beta: Real| {
        x.zero_grad();
        w.zero_grad();
        let y = x.matmul(&w).unwrap();
        let l1 = y.silu().unwrap().sum().unwrap();
        let l2 = y.softmax(1).unwrap().mul(&y).unwrap().sum().unwrap();
        let l = l1.scale(alpha).unwrap().add(&l2.scale(beta).unwrap()).unwrap();
        l.backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (g1x, g1w) = grads(1.0, 0.0);
    let (g2x, g2w) = grads(0.0, 1.0);
    let (gx, gw) = grads(0.7, -1.3);
    for (i, g) in gx.iter().enumerate() {
        assert!((g - (0.7 * g1x[i] - 1.3 * g2x[i])).abs() < 1e-6);
    }
    for (i, g) in gw.iter().enumerate() {
        assert!((g - (0.7 * g1w[i] - 1.3 * g2w[i])).abs() < 1e-6);
    }
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut rng = Rng::new(99);
        let x = Tensor::randn(&[2, 3, 6, 6], &mut rng);
        let k = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let y = x.conv2d(&k, None).unwrap();
        y.group_norm(2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5)
            .unwrap()
            .softmax(3)
            .unwrap()
            .to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[a, b, c], &mut rng);
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn softmax_normalizes_any_finite_row(xs in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
        let n = xs.len();
        let t = Tensor::new(xs.iter().map(|&v| v as Real).collect(), &[n]).unwrap();
        let y = t.softmax(0).unwrap();
        let s: f64 = y.data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-5);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}

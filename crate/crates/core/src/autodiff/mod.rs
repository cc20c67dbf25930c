//! Reverse-mode automatic differentiation over an eagerly evaluated tape.
//!
//! A [`Graph`] records every operation as it is applied. Values are computed
//! immediately; [`Graph::backward`] then walks the tape once in reverse.
//!
//! ```
//! use tsa::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
//! let y = g.relu(x)?;
//! let loss = g.sum(y)?;
//! let grads = g.backward(loss)?;
//! assert_eq!(grads.get(x).data(), &[0.0, 1.0]);
//! # Ok::<(), tsa::Error>(())
//! ```

mod check;
mod graph;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, NodeId, Op};
pub(crate) use graph::log_softmax_row;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Nested-loop cross-correlation, kept independent of the graph kernels.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, ks) = (k.shape()[0], k.shape()[2]);
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let at = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[((bi * c + ci) * h + y as usize) * w + xx as usize]
            }
        };
        let mut out = Vec::new();
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    s += at(bi, ci, iy, ix)
                                        * k.data()[((oi * c + ci) * ks + ky) * ks + kx];
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 3], &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let an = g.constant(a.clone());
        let out = g.matmul(i, an).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn conv2d_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xn, kn) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g
            .apply(Op::Conv2d { stride: 1, padding: 0 }, &[xn, kn])
            .unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        let expected = conv_oracle(&x, &k, 1, 0);
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conv2d_stride_and_padding_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xn, kn) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g
            .apply(Op::Conv2d { stride: 2, padding: 1 }, &[xn, kn])
            .unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        let expected = conv_oracle(&x, &k, 2, 1);
        assert!(g
            .value(y)
            .data()
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn sum_and_relu_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let loss = g.sum(y).unwrap();
        // d/dx of x * stop(x) is stop(x).
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn square_gradient_check() {
        let err = finite_diff_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_sum_has_vanishing_gradient() {
        let w = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.param(w);
        let lp = g.log_softmax(x, 3.0).unwrap();
        let p = g.exp(lp).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn nan_output_reports_infinity() {
        let err = finite_diff_check(
            |g, p| {
                let l = g.log(p[0])?;
                g.sum(l)
            },
            &[Tensor::vector(vec![-1.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, f64::INFINITY);
    }

    /// Runs the check for one op applied to random inputs, reduced through a
    /// random linear functional so every output entry matters.
    fn check_op(op: Op, shapes: &[&[usize]], seed: u64, positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        if positive {
            for p in &mut params {
                p.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            }
        }
        let probe = {
            let mut g = Graph::new();
            let ids: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
            let out = g.apply(op.clone(), &ids).unwrap();
            random(g.shape(out), &mut rng)
        };
        let err = finite_diff_check(
            |g, ids| {
                let out = g.apply(op.clone(), ids)?;
                let w = g.constant(probe.clone());
                let m = g.mul(out, w)?;
                g.sum(m)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{op:?}: relative error {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        check_op(Op::MatMul, &[&[3, 4], &[4, 2]], 1, false);
        check_op(Op::Add, &[&[3, 4], &[3, 4]], 2, false);
        check_op(Op::Add, &[&[3, 4], &[4]], 3, false);
        check_op(Op::Sub, &[&[3, 4], &[4]], 4, false);
        check_op(Op::Mul, &[&[2, 3], &[2, 3]], 5, false);
        check_op(Op::Mul, &[&[2, 3], &[3]], 6, false);
        check_op(Op::Relu, &[&[5, 3]], 7, false);
        check_op(Op::Exp, &[&[2, 3]], 8, false);
        check_op(Op::Log, &[&[2, 3]], 9, true);
        check_op(Op::Sum, &[&[2, 3]], 10, false);
        check_op(Op::Mean, &[&[2, 3]], 11, false);
        check_op(Op::Reshape(vec![3, 2]), &[&[2, 3]], 12, false);
        check_op(Op::Concat { axis: 1 }, &[&[2, 3], &[2, 1]], 13, false);
        check_op(Op::Concat { axis: 0 }, &[&[2, 3], &[1, 3]], 14, false);
        check_op(Op::Conv2d { stride: 1, padding: 1 }, &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], 15, false);
        check_op(Op::Conv2d { stride: 2, padding: 0 }, &[&[1, 1, 5, 5], &[2, 1, 3, 3]], 16, false);
        check_op(Op::MaxPool2d { size: 2 }, &[&[2, 2, 4, 4]], 17, false);
        check_op(Op::Scale(-2.5), &[&[3]], 18, false);
        check_op(Op::LogSoftmax { temperature: 1.0 }, &[&[3, 4]], 19, false);
        check_op(Op::LogSoftmax { temperature: 3.0 }, &[&[3, 4]], 20, false);
        check_op(Op::ClampMin(-0.5), &[&[3, 4]], 21, false);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[6, 7], &mut rng);
        let b = random(&[7, 5], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let m = g.matmul(x, y).unwrap();
            let l = g.log_softmax(m, 2.0).unwrap();
            g.value(l).clone()
        };
        let (r1, r2) = (run(), run());
        assert!(r1
            .data()
            .iter()
            .zip(r2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

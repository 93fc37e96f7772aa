//! Dense tensors and a reverse-mode tape covering the operators the model uses.

pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "test");
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_of_two_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let y = t.softmax(x);
        assert_close(t.value(y).data(), &[0.73106, 0.26894], 1e-5);
    }

    #[test]
    fn identity_matmul() {
        let a = rand_tensor(&[3, 3], 1);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut t = Tape::new();
        let (iv, av) = (t.constant(eye), t.constant(a.clone()));
        let out = t.matmul(iv, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn topk_selects_largest() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.1, 0.9, 0.5]).unwrap());
        let (y, sel) = t.topk_mask(x, 2).unwrap();
        assert_eq!(sel, vec![vec![1, 2]]);
        assert_eq!(t.value(y).data()[0], f64::NEG_INFINITY);
        let p = t.softmax(y);
        assert_eq!(t.value(p).data()[0], 0.0);
    }

    #[test]
    fn topk_range_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.topk_mask(x, 0).is_err());
        assert!(t.topk_mask(x, 4).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.mul(a, a).unwrap();
        let l = t.sum(b);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0, 4.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn all_masked_row_softmax_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        let m = t
            .masked_fill(x, &[true, true, false, true], f64::NEG_INFINITY)
            .unwrap();
        let y = t.softmax(m);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| g.is_finite()));
    }

    /// Runs a gradient check for a unary-ish builder and asserts the tolerance.
    fn fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
        let rep = check_gradients(inputs, 1e-5, f).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    /// Weighted sum readout so every output element gets a distinct upstream gradient.
    fn readout(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
        let w = t.constant(rand_tensor(t.shape(y), seed));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn fd_matmul_shared_and_batched() {
        fd(
            &[rand_tensor(&[2, 3, 4], 2), rand_tensor(&[4, 5], 3)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, 9)
            },
        );
        fd(
            &[rand_tensor(&[2, 3, 4], 4), rand_tensor(&[2, 4, 2], 5)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, 9)
            },
        );
    }

    #[test]
    fn fd_transpose_add_mul_broadcast() {
        fd(&[rand_tensor(&[2, 3, 4], 6)], |t, v| {
            let y = t.transpose(v[0])?;
            readout(t, y, 1)
        });
        for bshape in [vec![4], vec![2, 3, 1], vec![2, 3, 4], vec![3, 1]] {
            fd(
                &[rand_tensor(&[2, 3, 4], 7), rand_tensor(&bshape, 8)],
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let p = t.mul(s, v[1])?;
                    readout(t, p, 2)
                },
            );
        }
    }

    #[test]
    fn fd_concat_slice_reshape_scale() {
        fd(
            &[rand_tensor(&[2, 3], 10), rand_tensor(&[2, 2], 11)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 3)?;
                let r = t.reshape(s, &[3, 2])?;
                let y = t.scale(r, 1.7);
                readout(t, y, 3)
            },
        );
        fd(
            &[rand_tensor(&[2, 3], 12), rand_tensor(&[1, 3], 13)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                readout(t, c, 4)
            },
        );
    }

    #[test]
    fn fd_nonlinearities() {
        fd(&[rand_tensor(&[3, 4], 14)], |t, v| {
            let y = t.softmax(v[0]);
            readout(t, y, 5)
        });
        fd(&[rand_tensor(&[3, 4], 15)], |t, v| {
            let y = t.log_softmax(v[0]);
            readout(t, y, 6)
        });
        fd(&[rand_tensor(&[3, 4], 16)], |t, v| {
            let y = t.gelu(v[0]);
            readout(t, y, 7)
        });
        fd(&[rand_tensor(&[3, 4], 17)], |t, v| {
            let y = t.softplus(v[0]);
            readout(t, y, 8)
        });
        fd(&[rand_tensor(&[3, 5], 18)], |t, v| {
            let y = t.layer_norm(v[0], 1e-5);
            readout(t, y, 9)
        });
    }

    #[test]
    fn fd_indexing_ops() {
        fd(&[rand_tensor(&[5, 3], 19)], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2], &[2, 2])?;
            readout(t, y, 10)
        });
        fd(&[rand_tensor(&[3, 4], 20)], |t, v| {
            let y = t.pick(v[0], &[(0, 1), (2, 3), (0, 1)])?;
            readout(t, y, 11)
        });
        fd(&[rand_tensor(&[3, 2], 21)], |t, v| {
            let y = t.scatter_rows(v[0], &[4, 1, 4], 5)?;
            readout(t, y, 12)
        });
        fd(&[rand_tensor(&[3, 4], 22)], |t, v| {
            let y = t.masked_fill(
                v[0],
                &[
                    true, false, false, true, false, false, false, false, true, true, false, false,
                ],
                -3.0,
            )?;
            readout(t, y, 13)
        });
        fd(&[rand_tensor(&[3, 4], 23)], |t, v| {
            let (y, _) = t.topk_mask(v[0], 2)?;
            let s = t.softmax(y);
            readout(t, s, 14)
        });
        fd(&[rand_tensor(&[3, 4], 24)], |t, v| {
            let y = t.sum_last(v[0]);
            let m = t.mean(y);
            let s = t.sum(v[0]);
            t.add(m, s)
        });
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let n = xs.len();
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![n], xs.clone()).unwrap());
            let y = t.softmax(x);
            let shifted = t.constant(Tensor::new(vec![n], xs.iter().map(|v| v + c).collect()).unwrap());
            let ys = t.softmax(shifted);
            let s: f64 = t.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for (a, b) in t.value(y).data().iter().zip(t.value(ys).data()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn concat_then_slice_round_trips(
            rows in 1usize..4, wa in 1usize..5, wb in 1usize..5, seed in 0u64..1000,
        ) {
            let a = rand_tensor(&[rows, wa], seed);
            let b = rand_tensor(&[rows, wb], seed + 1);
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.concat(&[va, vb], 1).unwrap();
            let sa = t.slice(c, 1, 0, wa).unwrap();
            let sb = t.slice(c, 1, wa, wb).unwrap();
            prop_assert_eq!(t.value(sa), &a);
            prop_assert_eq!(t.value(sb), &b);
        }
    }
}

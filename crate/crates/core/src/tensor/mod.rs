//! Dense `f64` tensors and a reverse-mode autodiff tape.

mod kernels;
mod tape;
mod value;

use thiserror::Error;

pub use kernels::{dot, sigmoid, softplus};
pub use tape::{concat_cols, concat_rows, Gradients, NodeId, Tape, Var};
pub use value::Tensor;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close_grad(ad: &Tensor, fd: &[f64]) {
        for (a, f) in ad.data().iter().zip(fd) {
            let rel = (a - f).abs() / f.abs().max(1.0);
            assert!(rel < 1e-4, "ad {a} vs fd {f}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(*a.matmul(&i).unwrap().value(), *a.value());
        let ones = tape.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let c = a.matmul(&ones).unwrap();
        assert_eq!(c.value().data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), vec![2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b0 = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let loss = a.matmul(&b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(&a0, |x| {
            let t = Tape::new();
            let a = t.constant(x.clone());
            let b = t.constant(b0.clone());
            let v = a.matmul(&b).unwrap().sum().value().item();
            v
        });
        assert_close_grad(&g.wrt(a), &fd);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = x.layer_norm(&gain, &bias, 0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);

        let g3 = tape.constant(Tensor::vector(vec![2.0, -1.0, 0.5]));
        let b3 = tape.constant(Tensor::vector(vec![0.3, 0.1, -0.2]));
        let c = tape.constant(Tensor::vector(vec![4.0, 4.0, 4.0]));
        let y = c.layer_norm(&g3, &b3, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.value().data(), &[0.3, 0.1, -0.2]);
    }

    #[test]
    fn layer_norm_statistics_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[6, 16], 3.0, &mut rng);
        let tape = Tape::new();
        let gain = tape.constant(Tensor::full(&[16], 1.0));
        let bias = tape.constant(Tensor::zeros(&[16]));
        let y = tape.constant(x0).layer_norm(&gain, &bias, 0.0).unwrap();
        let v = y.value();
        for r in 0..6 {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let g0 = Tensor::randn(&[8], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let f = |x: &Tensor, g: &Tensor| {
            let t = Tape::new();
            let y = t
                .constant(x.clone())
                .layer_norm(
                    &t.constant(g.clone()),
                    &t.constant(Tensor::zeros(&[8])),
                    LAYER_NORM_EPS,
                )
                .unwrap();
            let v = y.mul(&t.constant(w0.clone())).unwrap().sum().value().item();
            v
        };
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(Tensor::zeros(&[8]));
        let w = tape.constant(w0.clone());
        let loss = x
            .layer_norm(&g, &b, LAYER_NORM_EPS)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum();
        let grads = tape.backward(loss).unwrap();
        assert_close_grad(&grads.wrt(x), &numeric_grad(&x0, |x| f(x, &g0)));
        assert_close_grad(&grads.wrt(g), &numeric_grad(&g0, |g| f(&x0, g)));
    }

    #[test]
    fn softmax_and_losses() {
        let tape = Tape::new();
        let s = tape
            .constant(Tensor::vector(vec![0.0, 0.0, 0.0]))
            .softmax(0)
            .unwrap();
        for &p in s.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let bce = tape.constant(Tensor::scalar(0.0)).bce(&[1.0]).unwrap();
        assert!((bce.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert_eq!(
            bad.softmax(0).unwrap_err(),
            TensorError::NonFinite { op: "softmax" }
        );
        assert!(bad.relu().is_err());
        assert!(bad.sigmoid().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&[3, 4, 5], 4.0, &mut rng);
        let tape = Tape::new();
        for axis in 0..3 {
            let y = tape.constant(x0.clone()).softmax(axis).unwrap();
            let v = y.value();
            let shape = v.shape().to_vec();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..shape[axis])
                        .map(|j| v.data()[(o * shape[axis] + j) * inner + i])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = Tensor::randn(&[4, 6], 2.0, &mut rng);
        let targets = [0usize, 5, 2, 2];
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = x.cross_entropy(&targets).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(&x0, |x| {
            let t = Tape::new();
            let v = t
                .constant(x.clone())
                .cross_entropy(&targets)
                .unwrap()
                .value()
                .item();
            v
        });
        assert_close_grad(&g.wrt(x), &fd);

        let w0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = x
            .softmax(1)
            .unwrap()
            .mul(&tape.constant(w0.clone()))
            .unwrap()
            .sum();
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(&x0, |x| {
            let t = Tape::new();
            let v = t
                .constant(x.clone())
                .softmax(1)
                .unwrap()
                .mul(&t.constant(w0.clone()))
                .unwrap()
                .sum()
                .value()
                .item();
            v
        });
        assert_close_grad(&g.wrt(x), &fd);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        fn build<'t>(t: &'t Tape, x: Tensor, leaf: bool, w0: &Tensor) -> (Var<'t>, Var<'t>) {
            let x = if leaf { t.leaf(x) } else { t.constant(x) };
            let w = t.constant(w0.clone());
            let a = x.slice_cols(1, 3).unwrap().gelu().unwrap();
            let b = x.slice_cols(0, 3).unwrap().sigmoid().unwrap();
            let c = concat_cols(&[a, b]).unwrap();
            let top = x.slice_rows(0, 2).unwrap();
            let bot = x.slice_rows(2, 2).unwrap().scale(-0.5);
            let d = concat_rows(&[bot, top]).unwrap();
            let e = c.add(&d).unwrap().transpose().unwrap();
            let f = e.matmul_t(&w).unwrap();
            let bias = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
            let y = f.add_row(&bias).unwrap().relu().unwrap();
            let idx = x.gather(&[3, 0, 3]).unwrap().sum();
            (x, y.sum().add(&idx).unwrap())
        }
        let tape = Tape::new();
        let (x, loss) = build(&tape, x0.clone(), true, &w0);
        let g = tape.backward(loss).unwrap();
        let fd = numeric_grad(&x0, |x| {
            let t = Tape::new();
            let v = build(&t, x.clone(), false, &w0).1.value().item();
            v
        });
        assert_close_grad(&g.wrt(x), &fd);
    }

    #[test]
    fn backward_edge_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = x.gelu().unwrap().sum().scale(0.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        assert!(tape.backward(x.scale(2.0)).is_err());
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x0 = Tensor::randn(&[8, 8], 1.0, &mut rng);
            let tape = Tape::new();
            let x = tape.leaf(x0);
            let y = x
                .matmul(&x)
                .unwrap()
                .softmax(1)
                .unwrap()
                .gelu()
                .unwrap()
                .sum();
            let v = y.value().item();
            let g = tape.backward(y).unwrap().wrt(x);
            (
                v.to_bits(),
                g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}

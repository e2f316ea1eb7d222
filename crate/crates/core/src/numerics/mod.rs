//! Dense tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{Mode, Tape, UnaryFn, Var};
pub use tensor::{Real, Tensor, MAX_RANK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("invalid shape {shape:?} (rank 1..=3, positive extents)")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Precondition { op: &'static str, detail: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_var(tape: &mut Tape<'_>, v: &[f64], grad: bool) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()).unwrap().with_grad(grad))
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1., 2., 3., 4.]);

        let a = tape.constant(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, NumericsError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn unary_fixed_points() {
        let mut tape = Tape::<f64>::new();
        let z = vec_var(&mut tape, &[0.0], false);
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
        assert_eq!(tape.value(t), &[0.0]);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[1.0, -2.0, 3.0], true);
        let y = tape.dropout(x, 0.1, vec![false, false, false], Mode::Infer).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[1.0, 2.0], true);
        let y = tape.dropout(x, 0.5, vec![true, false], Mode::Train).unwrap();
        assert_eq!(tape.value(y), &[2.0, 0.0]);
        assert!(tape.dropout(x, 0.5, vec![true], Mode::Train).is_err());
        assert!(tape.dropout(x, 1.0, vec![true, true], Mode::Train).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[1.0, 0.0], false);
        assert!(matches!(tape.log(x), Err(NumericsError::Domain { op: "log", .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let c = vec_var(&mut tape, &[2.5, 2.5, 2.5], false);
        let s = tape.softmax(c, 0).unwrap();
        for &v in tape.value(s) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let one = vec_var(&mut tape, &[-7.0], false);
        let s1 = tape.softmax(one, 0).unwrap();
        assert_eq!(tape.value(s1), &[1.0]);
        let big = vec_var(&mut tape, &[1000.0, 0.0], false);
        let sb = tape.softmax(big, 0).unwrap();
        assert_abs_diff_eq!(tape.value(sb)[0], 1.0, epsilon = 1e-12);
        assert!(tape.value(sb)[1] < 1e-300);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_rank2_axis1_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 5.]).unwrap());
        let s = tape.softmax(m, 1).unwrap();
        let v = tape.value(s);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let u = vec_var(&mut tape, &[0.3; 4], false);
        let l = tape.cross_entropy(u, 2).unwrap();
        assert_abs_diff_eq!(tape.value(l)[0], 4f64.ln(), epsilon = 1e-12);
        let peaked = vec_var(&mut tape, &[0.0, 30.0, 0.0], false);
        let l2 = tape.cross_entropy(peaked, 1).unwrap();
        assert!(tape.value(l2)[0] < 1e-12);
        assert!(matches!(tape.cross_entropy(u, 4), Err(NumericsError::Index { .. })));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[3.0], true);
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));

        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[3.0], true);
        let s = tape.add(x, x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Some(&[2.0][..]));
    }

    #[test]
    fn backward_twice_doubles_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[3.0], true);
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x), Some(&[12.0][..]));
        tape.zero_grad();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[1.0, 2.0], true);
        assert!(matches!(tape.backward(x), Err(NumericsError::Shape { op: "backward", .. })));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = vec_var(&mut tape, &[1.0, 2.0], true);
        let frozen = vec_var(&mut tape, &[3.0, 4.0], false);
        let d = tape.dot(x, frozen).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x), Some(&[3.0, 4.0][..]));
        assert_eq!(tape.grad(frozen), None);
    }

    #[test]
    fn single_precision_forward() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::vector(vec![0.0f32, 1.0]).unwrap().with_grad(true));
        let s = tape.softmax(x, 0).unwrap();
        let total: f32 = tape.value(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f64>::new(&[0], vec![]).is_err());
    }
}

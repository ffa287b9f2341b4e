use crate::scalar::Scalar;

use super::Matrix;

/// Numerically stable softmax of one vector (max-subtracted).
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Vector-Jacobian product of softmax given its output `y`:
/// `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    let inner: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    y.iter().zip(dy).map(|(&a, &b)| a * (b - inner)).collect()
}

pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&softmax(x.row(i)));
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    assert_eq!(y.shape(), dy.shape());
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        out.row_mut(i)
            .copy_from_slice(&softmax_backward(y.row(i), dy.row(i)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_uniform_row() {
        let y = softmax(&[3.0f64; 4]);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let y = softmax(&[1000.0f64, 0.0]);
        assert_eq!(y[0], 1.0);
        assert!(y[1] >= 0.0 && y[1] < 1e-300);
        let y32 = softmax(&[1000.0f32, 0.0]);
        assert_eq!(y32, vec![1.0, 0.0]);
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..35).map(|_| rng.random_range(-20.0..20.0)).collect();
        let y = softmax_rows(&Matrix::from_vec(5, 7, data).unwrap());
        for i in 0..5 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
            assert!(y.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probe: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = softmax(&x);
        let analytic = softmax_backward(&y, &probe);
        let rep = grad_check(
            &mut x,
            |x| softmax(x).iter().zip(&probe).map(|(a, b)| a * b).sum(),
            &analytic,
            1e-5,
            1e-6,
        );
        assert!(rep.passed, "{rep}");
    }
}

use rand::Rng;

use crate::scalar::Scalar;

use super::{check_shape, Matrix, NnError};

/// Affine map `y = x·W + b`, applied to every row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self, NnError> {
        if bias.len() != weight.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::glorot(fan_in, fan_out, rng),
            bias: vec![T::zero(); fan_out],
        }
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, NnError> {
        if x.cols() != self.fan_in() {
            return Err(NnError::ShapeMismatch(format!(
                "linear input has {} columns, layer expects {}",
                x.cols(),
                self.fan_in()
            )));
        }
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Single-vector convenience wrapper around [`Linear::forward`].
    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.into_vec())
    }

    pub fn backward(&self, x: &Matrix<T>, d_out: &Matrix<T>) -> Result<LinearGrads<T>, NnError> {
        check_shape("linear input", x.shape(), (x.rows(), self.fan_in()))?;
        check_shape("linear output grad", d_out.shape(), (x.rows(), self.fan_out()))?;
        Ok(LinearGrads {
            weight: x.t_matmul(d_out),
            bias: d_out.col_sums(),
            input: d_out.matmul_t(&self.weight),
        })
    }

    pub fn backward_vec(&self, x: &[T], d_out: &[T]) -> Result<LinearGrads<T>, NnError> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let dm = Matrix::from_vec(1, d_out.len(), d_out.to_vec())?;
        self.backward(&xm, &dm)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> LinearGrads<T> {
    /// Accumulates parameter gradients into `(weight, bias)` buffers.
    pub fn accumulate_into(&self, acc: &mut Linear<T>) {
        acc.weight.add_assign(&self.weight);
        for (a, &g) in acc.bias.iter_mut().zip(&self.bias) {
            *a += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.25, 0.0, 9.0]]).unwrap();
        let lin = Linear::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(lin.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::init(4, 3, &mut rng);
        lin.bias = vec![0.5, -1.0, 2.0];
        let y = lin.forward(&Matrix::zeros(2, 4)).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let lin = Linear::<f64>::zeros(4, 2);
        assert!(matches!(
            lin.forward(&Matrix::zeros(3, 5)),
            Err(NnError::ShapeMismatch(_))
        ));
        assert!(Linear::new(Matrix::<f64>::zeros(2, 3), vec![0.0; 2]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lin = Linear::<f64>::init(4, 2, &mut rng);
        let x = Matrix::<f64>::glorot(3, 4, &mut rng);
        // Fixed random projection of the output makes the loss scalar.
        let probe = Matrix::<f64>::glorot(3, 2, &mut rng);
        let loss = |l: &Linear<f64>, x: &Matrix<f64>| {
            let y = l.forward(x).unwrap();
            crate::nn::dot(y.data(), probe.data())
        };
        let g = lin.backward(&x, &probe).unwrap();

        let mut w = lin.weight.data().to_vec();
        let rep = grad_check(&mut w, |w| {
            let mut l = lin.clone();
            l.weight.data_mut().copy_from_slice(w);
            loss(&l, &x)
        }, g.weight.data(), 1e-5, 1e-6);
        assert!(rep.passed, "{rep}");

        let mut b = lin.bias.clone();
        let rep = grad_check(&mut b, |b| {
            let mut l = lin.clone();
            l.bias.copy_from_slice(b);
            loss(&l, &x)
        }, &g.bias, 1e-5, 1e-6);
        assert!(rep.passed, "{rep}");

        let mut xi = x.data().to_vec();
        let rep = grad_check(&mut xi, |xi| {
            loss(&lin, &Matrix::from_vec(3, 4, xi.to_vec()).unwrap())
        }, g.input.data(), 1e-5, 1e-6);
        assert!(rep.passed, "{rep}");
    }
}

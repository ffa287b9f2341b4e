use rand::Rng;

use crate::scalar::Scalar;

use super::{check_shape, softmax_rows, softmax_rows_backward, Linear, Matrix, NnError};

pub const DEFAULT_HEADS: usize = 16;

/// Multi-head self-attention with a residual connection:
/// `X' = X + concat_h(softmax(Q_h K_hᵀ / √d_h) V_h) · W_o + b_o`.
///
/// The per-head projections are stored as column blocks of full `D × D`
/// matrices; head `h` owns columns `[h·d_h, (h+1)·d_h)`. No positional
/// encoding is applied, so the map is equivariant under frame permutation.
///
/// The key projection has no bias: adding a constant to every key shifts
/// each score row uniformly and cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaParams<T> {
    pub heads: usize,
    pub query: Linear<T>,
    /// `D × D`, bias-free.
    pub key: Matrix<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MsaCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    attn: Vec<Matrix<T>>,
    context: Matrix<T>,
}

impl<T> MsaCache<T> {
    /// Per-head `T × T` attention weights.
    pub fn attention(&self) -> &[Matrix<T>] {
        &self.attn
    }
}

#[derive(Debug, Clone)]
pub struct MsaGrads<T> {
    pub params: MsaParams<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> MsaParams<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self, NnError> {
        Self::check_heads(dim, heads)?;
        Ok(Self {
            heads,
            query: Linear::init(dim, dim, rng),
            key: Matrix::glorot(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
        })
    }

    pub fn zeros(dim: usize, heads: usize) -> Result<Self, NnError> {
        Self::check_heads(dim, heads)?;
        Ok(Self {
            heads,
            query: Linear::zeros(dim, dim),
            key: Matrix::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
        })
    }

    fn check_heads(dim: usize, heads: usize) -> Result<(), NnError> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "feature dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.query.fan_in()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn validate(&self, x: &Matrix<T>) -> Result<(), NnError> {
        let d = self.dim();
        Self::check_heads(d, self.heads)?;
        for (name, w) in [
            ("query", &self.query.weight),
            ("key", &self.key),
            ("value", &self.value.weight),
            ("output", &self.output.weight),
        ] {
            check_shape(name, w.shape(), (d, d))?;
        }
        if x.rows() == 0 {
            return Err(NnError::ShapeMismatch("empty feature sequence".into()));
        }
        check_shape("msa input", x.shape(), (x.rows(), d))
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MsaCache<T>), NnError> {
        self.validate(x)?;
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.query.forward(x)?;
        let k = x.matmul(&self.key);
        let v = self.value.forward(x)?;
        let mut context = Matrix::zeros(x.rows(), self.dim());
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.col_block(h * dh, dh), k.col_block(h * dh, dh), v.col_block(h * dh, dh));
            let mut scores = qh.matmul_t(&kh);
            scores.scale_assign(scale);
            let a = softmax_rows(&scores);
            context.set_col_block(h * dh, &a.matmul(&vh));
            attn.push(a);
        }
        let mut out = self.output.forward(&context)?;
        out.add_assign(x);
        Ok((out, MsaCache { q, k, v, attn, context }))
    }

    pub fn backward(
        &self,
        x: &Matrix<T>,
        cache: &MsaCache<T>,
        d_out: &Matrix<T>,
    ) -> Result<MsaGrads<T>, NnError> {
        self.validate(x)?;
        check_shape("msa output grad", d_out.shape(), x.shape())?;
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        let g_out = self.output.backward(&cache.context, d_out)?;
        let d_context = &g_out.input;
        let mut dq = Matrix::zeros(x.rows(), self.dim());
        let mut dk = Matrix::zeros(x.rows(), self.dim());
        let mut dv = Matrix::zeros(x.rows(), self.dim());
        for h in 0..self.heads {
            let a = &cache.attn[h];
            let qh = cache.q.col_block(h * dh, dh);
            let kh = cache.k.col_block(h * dh, dh);
            let vh = cache.v.col_block(h * dh, dh);
            let d_ctx_h = d_context.col_block(h * dh, dh);
            let d_a = d_ctx_h.matmul_t(&vh);
            dv.set_col_block(h * dh, &a.t_matmul(&d_ctx_h));
            let mut d_scores = softmax_rows_backward(a, &d_a);
            d_scores.scale_assign(scale);
            dq.set_col_block(h * dh, &d_scores.matmul(&kh));
            dk.set_col_block(h * dh, &d_scores.t_matmul(&qh));
        }
        let g_q = self.query.backward(x, &dq)?;
        let g_v = self.value.backward(x, &dv)?;

        // Residual path contributes the identity.
        let mut d_input = d_out.clone();
        d_input.add_assign(&g_q.input);
        d_input.add_assign(&dk.matmul_t(&self.key));
        d_input.add_assign(&g_v.input);

        let strip = |g: super::LinearGrads<T>| Linear {
            weight: g.weight,
            bias: g.bias,
        };
        Ok(MsaGrads {
            params: MsaParams {
                heads: self.heads,
                query: strip(g_q),
                key: x.t_matmul(&dk),
                value: strip(g_v),
                output: strip(g_out),
            },
            input: d_input,
        })
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.query.weight.data(),
            &self.query.bias,
            self.key.data(),
            self.value.weight.data(),
            &self.value.bias,
            self.output.weight.data(),
            &self.output.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.query.weight.data_mut(),
            &mut self.query.bias,
            self.key.data_mut(),
            self.value.weight.data_mut(),
            &mut self.value.bias,
            self.output.weight.data_mut(),
            &mut self.output.bias,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> MsaParams<U> {
        MsaParams {
            heads: self.heads,
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dot, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let data = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(t, d, data).unwrap()
    }

    #[test]
    fn zero_parameters_are_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_seq(7, 32, &mut rng);
        let p = MsaParams::<f64>::zeros(32, 16).unwrap();
        let (y, _) = p.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_frame_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MsaParams::<f64>::init(8, 4, &mut rng).unwrap();
        let x = random_seq(1, 8, &mut rng);
        let (y, cache) = p.forward(&x).unwrap();
        assert!(cache.attention().iter().all(|a| a.data() == [1.0]));
        let v = p.value.forward(&x).unwrap();
        let mut expect = p.output.forward(&v).unwrap();
        expect.add_assign(&x);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MsaParams::<f64>::init(32, 16, &mut rng).unwrap();
        let x = random_seq(6, 32, &mut rng);
        let (_, cache) = p.forward(&x).unwrap();
        for a in cache.attention() {
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(MsaParams::<f64>::zeros(30, 16).is_err());
        let p = MsaParams::<f64>::zeros(32, 16).unwrap();
        assert!(p.forward(&Matrix::zeros(3, 16)).is_err());
    }

    #[test]
    fn permuting_frames_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MsaParams::<f64>::init(16, 4, &mut rng).unwrap();
        let x = random_seq(5, 16, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = Matrix::from_rows(&rows).unwrap();
        let (y, _) = p.forward(&x).unwrap();
        let (yp, _) = p.forward(&xp).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, d, h) = (6, 32, 16);
        let p = MsaParams::<f64>::init(d, h, &mut rng).unwrap();
        let x = random_seq(t, d, &mut rng);
        let probe = random_seq(t, d, &mut rng);
        let loss = |p: &MsaParams<f64>, x: &Matrix<f64>| dot(p.forward(x).unwrap().0.data(), probe.data());
        let (_, cache) = p.forward(&x).unwrap();
        let g = p.backward(&x, &cache, &probe).unwrap();

        let analytic = g.params.tensors();
        for (which, tensor) in p.tensors().into_iter().enumerate() {
            let mut w = tensor.to_vec();
            let rep = grad_check(&mut w, |w| {
                let mut q = p.clone();
                q.tensors_mut()[which].copy_from_slice(w);
                loss(&q, &x)
            }, analytic[which], 1e-5, 1e-4);
            assert!(rep.passed, "tensor {which}: {rep}");
        }

        let mut xi = x.data().to_vec();
        let rep = grad_check(&mut xi, |xi| loss(&p, &Matrix::from_vec(t, d, xi.to_vec()).unwrap()),
            g.input.data(), 1e-5, 1e-4);
        assert!(rep.passed, "input: {rep}");
    }
}

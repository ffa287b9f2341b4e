use crate::nn::NnError;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments for tensors of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = lengths
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>, lr: f64) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch(format!("tensor {i} changed length")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bias1 = T::of(1.0 - self.beta1.powi(t));
        let bias2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((pk, &gk), mk), vk) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mk = b1 * *mk + c1 * gk;
                *vk = b2 * *vk + c2 * gk * gk;
                let m_hat = *mk / bias1;
                let v_hat = *vk / bias2;
                *pk -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

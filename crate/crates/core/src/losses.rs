//! KL, focal, center and supervised-contrastive losses with analytic
//! gradients, context broadcasting, and their weighted combination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{dot, Matrix, NnError};
use crate::scalar::Scalar;

/// Lower clip applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("class {class} outside 0..{n_classes}")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// SupCon temperature.
    pub tau: f64,
    /// Weights of (KL, focal, center, SupCon).
    pub lambdas: [f64; 4],
    pub proj_dim: usize,
    pub cb_enabled: bool,
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            tau: 0.07,
            lambdas: [1.0, 1.0, 0.1, 0.1],
            proj_dim: 64,
            cb_enabled: true,
            normalize_embeddings: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(LossError::InvalidConfig(format!("lambdas must be >= 0: {:?}", self.lambdas)));
        }
        if self.lambdas.iter().all(|&l| l == 0.0) {
            return Err(LossError::InvalidConfig("at least one lambda must be positive".into()));
        }
        if self.proj_dim == 0 {
            return Err(LossError::InvalidConfig("proj_dim must be positive".into()));
        }
        Ok(())
    }
}

fn check_distributions<T: Scalar>(y: &[T], y_hat: &[T]) -> Result<(), LossError> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(LossError::DomainError(format!(
            "target has {} classes, prediction has {}",
            y.len(),
            y_hat.len()
        )));
    }
    for (i, (&t, &p)) in y.iter().zip(y_hat).enumerate() {
        if t > T::zero() && !(p > T::zero()) {
            return Err(LossError::DomainError(format!(
                "predicted probability {p} for class {i} with target mass {t}"
            )));
        }
    }
    Ok(())
}

#[inline]
fn clip<T: Scalar>(p: T) -> T {
    p.max(T::of(PROB_FLOOR))
}

/// `Σ y_i ln(y_i / ŷ_i)` and its gradient with respect to `ŷ`.
///
/// Entries with `y_i = 0` contribute nothing; `ŷ` is clipped below at
/// [`PROB_FLOOR`] and the clip is passed straight through in the gradient.
pub fn kl_div<T: Scalar>(y: &[T], y_hat: &[T]) -> Result<(T, Vec<T>), LossError> {
    check_distributions(y, y_hat)?;
    let mut value = T::zero();
    let mut grad = vec![T::zero(); y.len()];
    for (i, (&t, &p)) in y.iter().zip(y_hat).enumerate() {
        if t > T::zero() {
            let p = clip(p);
            value += t * (t.ln() - p.ln());
            grad[i] = -t / p;
        }
    }
    Ok((value, grad))
}

/// `−Σ (1 − ŷ_i)^γ · ln(ŷ_i) · y_i` and its gradient with respect to `ŷ`.
pub fn focal<T: Scalar>(y: &[T], y_hat: &[T], gamma: T) -> Result<(T, Vec<T>), LossError> {
    check_distributions(y, y_hat)?;
    let mut value = T::zero();
    let mut grad = vec![T::zero(); y.len()];
    for (i, (&t, &p)) in y.iter().zip(y_hat).enumerate() {
        if t == T::zero() {
            continue;
        }
        let p = clip(p);
        let q = (T::one() - p).max(T::zero());
        let log_p = p.ln();
        let mod_factor = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
        value -= mod_factor * log_p * t;
        // d/dp of (1-p)^γ is −γ(1-p)^(γ−1); it multiplies ln p, which is 0 at p = 1.
        let d_mod = if gamma == T::zero() || q == T::zero() {
            T::zero()
        } else {
            -gamma * q.powf(gamma - T::one())
        };
        grad[i] = -t * (d_mod * log_p + mod_factor / p);
    }
    Ok((value, grad))
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    z.iter().map(|&v| v - lse).collect()
}

fn check_logits<T: Scalar>(y: &[T], z: &[T]) -> Result<(), LossError> {
    if y.len() != z.len() || y.is_empty() {
        return Err(LossError::DomainError(format!(
            "target has {} classes, logits have {}",
            y.len(),
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(LossError::DomainError(format!("logit {i} is not finite")));
    }
    Ok(())
}

/// [`kl_div`] of `softmax(z)`, evaluated through a stable log-softmax and
/// differentiated with respect to the logits `z`.
///
/// Log-probabilities are exact here, so no floor is applied: a saturated
/// softmax still yields a finite loss and a non-vanishing gradient.
pub fn kl_div_logits<T: Scalar>(y: &[T], z: &[T]) -> Result<(T, Vec<T>), LossError> {
    check_logits(y, z)?;
    let log_p = log_softmax(z);
    let mass: T = y.iter().copied().sum();
    let mut value = T::zero();
    for (&t, &lp) in y.iter().zip(&log_p) {
        if t > T::zero() {
            value += t * (t.ln() - lp);
        }
    }
    let grad = y.iter().zip(&log_p).map(|(&t, &lp)| mass * lp.exp() - t).collect();
    Ok((value, grad))
}

/// [`focal`] of `softmax(z)` with the gradient taken with respect to `z`.
pub fn focal_logits<T: Scalar>(y: &[T], z: &[T], gamma: T) -> Result<(T, Vec<T>), LossError> {
    check_logits(y, z)?;
    let log_p = log_softmax(z);
    let p: Vec<T> = log_p.iter().map(|v| v.exp()).collect();
    let mut value = T::zero();
    // a_i = ∂L/∂log p_i; then ∂L/∂z_k = a_k − p_k Σ a_i.
    let mut a = vec![T::zero(); y.len()];
    for i in 0..y.len() {
        let t = y[i];
        if t == T::zero() {
            continue;
        }
        let q = (T::one() - p[i]).max(T::zero());
        let mod_factor = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
        value -= t * mod_factor * log_p[i];
        let d_mod = if gamma == T::zero() || q == T::zero() {
            T::zero()
        } else {
            gamma * q.powf(gamma - T::one()) * p[i] * log_p[i]
        };
        a[i] = t * (d_mod - mod_factor);
    }
    let sum_a: T = a.iter().copied().sum();
    let grad = a.iter().zip(&p).map(|(&ak, &pk)| ak - pk * sum_a).collect();
    Ok((value, grad))
}

/// Per-class centers in the projected space (`classes × proj_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Centers<T> {
    pub centers: Matrix<T>,
}

impl<T: Scalar> Centers<T> {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            centers: Matrix::zeros(n_classes, dim),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn center(&self, k: usize) -> &[T] {
        self.centers.row(k)
    }

    fn check(&self, f_low: &Matrix<T>, labels: &[usize]) -> Result<(), LossError> {
        if f_low.rows() == 0 || f_low.rows() != labels.len() {
            return Err(LossError::DegenerateBatch(format!(
                "{} features for {} labels",
                f_low.rows(),
                labels.len()
            )));
        }
        if f_low.cols() != self.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "features have {} dims, centers {}",
                f_low.cols(),
                self.dim()
            ))
            .into());
        }
        if let Some(&class) = labels.iter().find(|&&c| c >= self.n_classes()) {
            return Err(LossError::InvalidClass {
                class,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }
}

/// `(1/B) Σ ‖f_i − c_{label_i}‖²` and its gradient `(2/B)(f_i − c)` with
/// respect to the features.
pub fn center_loss<T: Scalar>(
    f_low: &Matrix<T>,
    labels: &[usize],
    centers: &Centers<T>,
) -> Result<(T, Matrix<T>), LossError> {
    centers.check(f_low, labels)?;
    let b = T::of(labels.len() as f64);
    let two_over_b = T::of(2.0) / b;
    let mut value = T::zero();
    let mut grad = Matrix::zeros(f_low.rows(), f_low.cols());
    for (i, &k) in labels.iter().enumerate() {
        let c = centers.center(k);
        for (d, (&f, &cv)) in f_low.row(i).iter().zip(c).enumerate() {
            let diff = f - cv;
            value += diff * diff;
            grad[(i, d)] = two_over_b * diff;
        }
    }
    Ok((value / b, grad))
}

/// `c_k ← c_k + lr · mean_{i: label_i = k}(f_i − c_k)`; classes absent from
/// the batch keep their center.
pub fn update_centers<T: Scalar>(
    centers: &mut Centers<T>,
    f_low: &Matrix<T>,
    labels: &[usize],
    lr: T,
) -> Result<(), LossError> {
    centers.check(f_low, labels)?;
    let k = centers.n_classes();
    let dim = centers.dim();
    let mut sums = Matrix::<T>::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &f) in sums.row_mut(c).iter_mut().zip(f_low.row(i)) {
            *s += f;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let n = T::of(counts[c] as f64);
        let sum_row = sums.row(c).to_vec();
        for (cv, s) in centers.centers.row_mut(c).iter_mut().zip(sum_row) {
            *cv += lr * (s / n - *cv);
        }
    }
    Ok(())
}

/// Replaces every frame by `½(frame + mean over frames)`.
pub fn context_broadcast<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mean = x.col_means();
    let half = T::of(0.5);
    let mut out = x.clone();
    for t in 0..out.rows() {
        for (v, &m) in out.row_mut(t).iter_mut().zip(&mean) {
            *v = half * (*v + m);
        }
    }
    out
}

/// Context broadcasting is linear and self-adjoint, so its backward pass is
/// the same map applied to the upstream gradient.
pub fn context_broadcast_backward<T: Scalar>(d_out: &Matrix<T>) -> Matrix<T> {
    context_broadcast(d_out)
}

/// Supervised contrastive loss over all frames of a batch.
///
/// Every frame of utterance `b` is an anchor carrying `labels[b]`. For
/// anchor `i` with positives `P(i)` (same label, excluding `i`) and
/// candidates `A(i)` (all anchors except `i`):
/// `ℓ_i = −(1/|P(i)|) Σ_{p∈P(i)} log softmax_{A(i)}(z_i·z_k/τ)[p]`.
/// The sum over anchors is divided by the total anchor count (`B·T` for
/// equal-length utterances); anchors without positives contribute zero.
///
/// Returns the loss and its gradient with respect to each utterance's frame
/// embeddings (before normalisation when `normalize` is set).
pub fn supcon<T: Scalar>(
    frames: &[Matrix<T>],
    labels: &[usize],
    tau: T,
    normalize: bool,
) -> Result<(T, Vec<Matrix<T>>), LossError> {
    if frames.len() != labels.len() {
        return Err(LossError::DegenerateBatch(format!(
            "{} utterances for {} labels",
            frames.len(),
            labels.len()
        )));
    }
    if !(tau > T::zero()) {
        return Err(LossError::InvalidConfig("tau must be positive".into()));
    }
    let dim = frames.first().map_or(0, Matrix::cols);
    if frames.iter().any(|f| f.cols() != dim) {
        return Err(NnError::ShapeMismatch("frame embeddings of differing width".into()).into());
    }
    let n: usize = frames.iter().map(Matrix::rows).sum();
    if n < 2 {
        return Err(LossError::DegenerateBatch(format!("{n} anchors; SupCon needs at least 2")));
    }

    let mut z = Matrix::zeros(n, dim);
    let mut anchor_labels = Vec::with_capacity(n);
    let mut r = 0;
    for (f, &label) in frames.iter().zip(labels) {
        for t in 0..f.rows() {
            z.row_mut(r).copy_from_slice(f.row(t));
            anchor_labels.push(label);
            r += 1;
        }
    }

    let norms: Vec<T> = (0..n)
        .map(|i| {
            if normalize {
                dot(z.row(i), z.row(i)).sqrt().max(T::of(1e-12))
            } else {
                T::one()
            }
        })
        .collect();
    let mut u = z.clone();
    for (i, &nv) in norms.iter().enumerate() {
        for v in u.row_mut(i) {
            *v /= nv;
        }
    }

    let inv_tau = T::one() / tau;
    let mut sim = u.matmul_t(&u);
    sim.scale_assign(inv_tau);

    let mut counts = std::collections::HashMap::new();
    for &l in &anchor_labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }

    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    // g[i][k] = ∂ℓ_i/∂s_ik, scaled by 1/N.
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let positives = counts[&anchor_labels[i]] - 1;
        if positives == 0 {
            continue;
        }
        let row = sim.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
        let mut denom = T::zero();
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                denom += (s - max).exp();
            }
        }
        let lse = max + denom.ln();
        let inv_p = T::one() / T::of(positives as f64);
        let mut pos_sum = T::zero();
        let g_row = g.row_mut(i);
        for (k, &s) in row.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut gk = (s - lse).exp();
            if anchor_labels[k] == anchor_labels[i] {
                pos_sum += s;
                gk -= inv_p;
            }
            g_row[k] = gk * inv_n;
        }
        total += lse - pos_sum * inv_p;
    }
    let value = total * inv_n;

    // ∂L/∂u = (G + Gᵀ) U / τ
    let mut g_sym = g.transpose();
    g_sym.add_assign(&g);
    let mut du = g_sym.matmul(&u);
    du.scale_assign(inv_tau);

    let mut dz = du;
    if normalize {
        for i in 0..n {
            let proj = dot(dz.row(i), u.row(i));
            let nv = norms[i];
            let ui = u.row(i).to_vec();
            for (d, uv) in dz.row_mut(i).iter_mut().zip(ui) {
                *d = (*d - uv * proj) / nv;
            }
        }
    }

    let mut grads = Vec::with_capacity(frames.len());
    let mut r = 0;
    for f in frames {
        let mut gm = Matrix::zeros(f.rows(), dim);
        for t in 0..f.rows() {
            gm.row_mut(t).copy_from_slice(dz.row(r));
            r += 1;
        }
        grads.push(gm);
    }
    Ok((value, grads))
}

/// Values of the four terms on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub kl: T,
    pub focal: T,
    pub center: T,
    pub supcon: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub kl: T,
    pub focal: T,
    pub center: T,
    pub supcon: T,
    pub total: T,
}

/// `λ1·kl + λ2·focal + λ3·center + λ4·supcon`. A zero weight drops the
/// term entirely, so a non-finite value there cannot leak into the total.
pub fn combined_loss<T: Scalar>(parts: &LossParts<T>, lambdas: &[f64; 4]) -> LossReport<T> {
    let terms = [parts.kl, parts.focal, parts.center, parts.supcon];
    let total = terms
        .iter()
        .zip(lambdas)
        .filter(|(_, &l)| l != 0.0)
        .fold(T::zero(), |acc, (&v, &l)| acc + T::of(l) * v);
    LossReport {
        kl: parts.kl,
        focal: parts.focal,
        center: parts.center,
        supcon: parts.supcon,
        total,
    }
}

/// Everything the batch objective needs.
pub struct BatchInputs<'a, T> {
    /// `B × C` classifier logits.
    pub logits: &'a Matrix<T>,
    /// `B × C` soft targets.
    pub targets: &'a Matrix<T>,
    /// Hard (dominant) class per utterance.
    pub labels: &'a [usize],
    /// `B × proj_dim` projected utterance features.
    pub f_low: &'a Matrix<T>,
    /// Per-utterance frame embeddings fed to SupCon (after CB, if enabled).
    /// May be empty when the SupCon weight is zero.
    pub frames: &'a [Matrix<T>],
    pub centers: &'a Centers<T>,
}

/// Gradients of the weighted total with respect to the batch inputs.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    pub logits: Matrix<T>,
    pub f_low: Matrix<T>,
    pub frames: Vec<Matrix<T>>,
}

/// Evaluates the weighted four-term objective on a batch.
///
/// KL and focal are averaged over the batch and evaluated from the logits
/// (see [`kl_div_logits`], [`focal_logits`]). Terms whose weight is zero are skipped and
/// reported as exactly zero.
pub fn batch_loss<T: Scalar>(
    inputs: &BatchInputs<'_, T>,
    cfg: &LossConfig,
) -> Result<(LossReport<T>, BatchGrads<T>), LossError> {
    let (b, c) = inputs.logits.shape();
    if b == 0 || inputs.targets.shape() != (b, c) || inputs.labels.len() != b || inputs.f_low.rows() != b {
        return Err(LossError::DegenerateBatch("batch inputs disagree in size".into()));
    }
    let [l_kl, l_focal, l_center, l_supcon] = cfg.lambdas;
    let inv_b = T::one() / T::of(b as f64);
    let mut parts = LossParts::<T>::default();
    let mut d_logits = Matrix::zeros(b, c);

    if l_kl != 0.0 || l_focal != 0.0 {
        let gamma = T::of(cfg.gamma);
        for i in 0..b {
            let z = inputs.logits.row(i);
            let y = inputs.targets.row(i);
            let d_row = d_logits.row_mut(i);
            if l_kl != 0.0 {
                let (v, g) = kl_div_logits(y, z)?;
                parts.kl += v * inv_b;
                for (d, gv) in d_row.iter_mut().zip(g) {
                    *d += T::of(l_kl) * inv_b * gv;
                }
            }
            if l_focal != 0.0 {
                let (v, g) = focal_logits(y, z, gamma)?;
                parts.focal += v * inv_b;
                for (d, gv) in d_row.iter_mut().zip(g) {
                    *d += T::of(l_focal) * inv_b * gv;
                }
            }
        }
    }

    let mut d_f_low = Matrix::zeros(b, inputs.f_low.cols());
    if l_center != 0.0 {
        let (v, mut g) = center_loss(inputs.f_low, inputs.labels, inputs.centers)?;
        parts.center = v;
        g.scale_assign(T::of(l_center));
        d_f_low = g;
    }

    let mut d_frames: Vec<Matrix<T>> = inputs
        .frames
        .iter()
        .map(|f| Matrix::zeros(f.rows(), f.cols()))
        .collect();
    if l_supcon != 0.0 {
        let (v, gs) = supcon(inputs.frames, inputs.labels, T::of(cfg.tau), cfg.normalize_embeddings)?;
        parts.supcon = v;
        d_frames = gs
            .into_iter()
            .map(|mut g| {
                g.scale_assign(T::of(l_supcon));
                g
            })
            .collect();
    }

    Ok((
        combined_loss(&parts, &cfg.lambdas),
        BatchGrads {
            logits: d_logits,
            f_low: d_f_low,
            frames: d_frames,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let (v, _) = kl_div(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = kl_div(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.143_841_036_225_890_1).abs() < 1e-12);
        // Vanishing prediction on the true class is clipped, not infinite.
        let (v, _) = kl_div(&[1.0, 0.0], &[1e-300, 1.0]).unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(matches!(kl_div(&[1.0, 0.0], &[0.0, 1.0]), Err(LossError::DomainError(_))));
        // Zero prediction where the target is zero is fine.
        assert!(kl_div(&[0.0, 1.0], &[0.0, 1.0]).is_ok());
    }

    #[test]
    fn focal_examples() {
        let (v, _) = focal(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let (v, _) = focal(&[1.0, 0.0], &[0.5, 0.5], 2.0).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.173_286_795_139_986_3).abs() < 1e-12);
        for g in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let (v, grad) = focal(&[0.0, 1.0], &[0.0, 1.0], g).unwrap();
            assert_eq!(v, 0.0);
            assert!(grad.iter().all(|x: &f64| x.is_finite()));
        }
    }

    #[test]
    fn probability_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = [0.6, 0.0, 0.3, 0.1];
        let mut p: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        let (_, g) = kl_div(&y, &p).unwrap();
        let rep = grad_check(&mut p, |p| kl_div(&y, p).unwrap().0, &g, 1e-5, 1e-6);
        assert!(rep.passed, "kl {rep}");
        for gamma in [0.0, 0.5, 2.0] {
            let (_, g) = focal(&y, &p, gamma).unwrap();
            let rep = grad_check(&mut p, |p| focal(&y, p, gamma).unwrap().0, &g, 1e-5, 1e-6);
            assert!(rep.passed, "focal γ={gamma} {rep}");
        }
    }

    #[test]
    fn logit_forms_agree_with_probability_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = [0.0, 0.7, 0.3, 0.0, 0.0];
        for _ in 0..5 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = crate::nn::softmax(&z);
            let (a, _) = kl_div(&y, &p).unwrap();
            let (b, _) = kl_div_logits(&y, &z).unwrap();
            assert!((a - b).abs() < 1e-12);
            for gamma in [0.0, 0.5, 2.0] {
                let (a, gp) = focal(&y, &p, gamma).unwrap();
                let (b, gz) = focal_logits(&y, &z, gamma).unwrap();
                assert!((a - b).abs() < 1e-12);
                let chained = crate::nn::softmax_backward(&p, &gp);
                for (u, v) in chained.iter().zip(&gz) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let y = [0.25, 0.0, 0.75, 0.0];
        let mut z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = kl_div_logits(&y, &z).unwrap();
        let rep = grad_check(&mut z, |z| kl_div_logits(&y, z).unwrap().0, &g, 1e-5, 1e-6);
        assert!(rep.passed, "kl {rep}");
        for gamma in [0.0, 0.5, 2.0, 3.5] {
            let (_, g) = focal_logits(&y, &z, gamma).unwrap();
            let rep = grad_check(&mut z, |z| focal_logits(&y, z, gamma).unwrap().0, &g, 1e-5, 1e-6);
            assert!(rep.passed, "focal γ={gamma} {rep}");
        }
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let (v, g) = kl_div_logits(&[0.0f32, 1.0], &[500.0, -500.0]).unwrap();
        assert!((v - 1000.0).abs() < 1e-2);
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] + 1.0).abs() < 1e-6);
        let (v, g) = focal_logits(&[0.0f32, 1.0], &[500.0, -500.0], 2.0).unwrap();
        assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
        assert!(g[1] < 0.0);
    }

    #[test]
    fn center_examples() {
        let c = Centers { centers: Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap() };
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(center_loss(&f, &[0, 1], &c).unwrap().0, 0.0);
        let f = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (v, g) = center_loss(&f, &[1], &c).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(g.data(), &[6.0, 8.0]);
        assert!(matches!(center_loss(&f, &[2], &c), Err(LossError::InvalidClass { class: 2, .. })));
    }

    #[test]
    fn center_updates() {
        let mut c = Centers::<f64>::zeros(3, 2);
        let f = Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 5.0], vec![-2.0, 4.0]]).unwrap();
        update_centers(&mut c, &f, &[0, 0, 2], 1.0).unwrap();
        assert_eq!(c.center(0), &[2.0, 3.0]);
        assert_eq!(c.center(1), &[0.0, 0.0]);
        assert_eq!(c.center(2), &[-2.0, 4.0]);
        // Fixed-point iteration converges to the class mean.
        let mut c = Centers::<f64>::zeros(3, 2);
        for _ in 0..5000 {
            update_centers(&mut c, &f, &[0, 0, 2], 5e-3).unwrap();
        }
        assert!((c.center(0)[0] - 2.0).abs() < 1e-9 && (c.center(0)[1] - 3.0).abs() < 1e-9);
        assert!((c.center(2)[0] + 2.0).abs() < 1e-9 && (c.center(2)[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn context_broadcast_examples() {
        let one = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
        assert_eq!(context_broadcast(&one), one);
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(context_broadcast(&same), same);
        let x = Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(context_broadcast(&x).data(), &[2.5, 3.5]);
    }

    #[test]
    fn context_broadcast_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(5, 3, &mut rng);
        let probe = rand_mat(5, 3, &mut rng);
        let mut xi = x.data().to_vec();
        let rep = grad_check(&mut xi, |xi| {
            dot(context_broadcast(&Matrix::from_vec(5, 3, xi.to_vec()).unwrap()).data(), probe.data())
        }, context_broadcast_backward(&probe).data(), 1e-5, 1e-6);
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn supcon_examples() {
        let same = vec![Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap(), Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap()];
        let (v, _): (f64, _) = supcon(&same, &[1, 1], 1.0, true).unwrap();
        assert!(v.abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<_> = (0..4).map(|_| rand_mat(1, 3, &mut rng)).collect();
        let (v, g) = supcon(&frames, &[0, 1, 2, 3], 0.1, true).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
        assert!(matches!(
            supcon(&[rand_mat(1, 3, &mut rng)], &[0], 0.1, true),
            Err(LossError::DegenerateBatch(_))
        ));
        // One utterance with two frames is two anchors and is allowed.
        assert!(supcon(&[rand_mat(2, 3, &mut rng)], &[0], 0.1, true).is_ok());
    }

    /// Literal per-anchor, per-positive log-softmax evaluation.
    fn supcon_oracle(frames: &[Matrix<f64>], labels: &[usize], tau: f64) -> f64 {
        let mut anchors = Vec::new();
        for (f, &l) in frames.iter().zip(labels) {
            for t in 0..f.rows() {
                let n = f.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
                anchors.push((f.row(t).iter().map(|v| v / n).collect::<Vec<_>>(), l));
            }
        }
        let n = anchors.len();
        let sim = |i: usize, k: usize| anchors[i].0.iter().zip(&anchors[k].0).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&k| k != i && anchors[k].1 == anchors[i].1).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
            let mut acc = 0.0;
            for &p in &pos {
                acc += (sim(i, p).exp() / denom).ln();
            }
            total += -acc / pos.len() as f64;
        }
        total / n as f64
    }

    #[test]
    fn supcon_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (b, t) in [(2, 1), (3, 2), (5, 3)] {
            let frames: Vec<_> = (0..b).map(|_| rand_mat(t, 4, &mut rng)).collect();
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let got = supcon(&frames, &labels, 0.3, true).unwrap().0;
            let want = supcon_oracle(&frames, &labels, 0.3);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for normalize in [true, false] {
            let frames: Vec<_> = (0..3).map(|_| rand_mat(2, 4, &mut rng)).collect();
            let labels = [0, 1, 0];
            let (_, g) = supcon(&frames, &labels, 0.5, normalize).unwrap();
            let analytic: Vec<f64> = g.iter().flat_map(|m| m.data().to_vec()).collect();
            let mut flat: Vec<f64> = frames.iter().flat_map(|m| m.data().to_vec()).collect();
            let rep = grad_check(&mut flat, |v| {
                let fs: Vec<_> = v.chunks(8).map(|c| Matrix::from_vec(2, 4, c.to_vec()).unwrap()).collect();
                supcon(&fs, &labels, 0.5, normalize).unwrap().0
            }, &analytic, 1e-5, 1e-6);
            assert!(rep.passed, "normalize={normalize}: {rep}");
        }
    }

    #[test]
    fn combined_examples() {
        let parts = LossParts { kl: 0.7, focal: 0.3, center: 2.0, supcon: 4.0 };
        assert_eq!(combined_loss(&parts, &[1.0, 0.0, 0.0, 0.0]).total, 0.7);
        assert_eq!(combined_loss(&LossParts::<f64>::default(), &[1.0, 1.0, 0.1, 0.1]).total, 0.0);
        let r: LossReport<f64> = combined_loss(&parts, &[1.0, 0.5, 0.1, 0.1]);
        assert!((r.total - (0.7 + 0.15 + 0.2 + 0.4)).abs() < 1e-12);
        let nan = LossParts { kl: 1.0, focal: f64::NAN, center: 0.0, supcon: 0.0 };
        assert_eq!(combined_loss(&nan, &[1.0, 0.0, 0.0, 0.0]).total, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambdas: [0.0; 4], ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_diagonal(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (y, p) = (norm(&a), norm(&b));
            prop_assert!(kl_div(&y, &p).unwrap().0 >= -1e-15);
            prop_assert!(kl_div(&y, &y).unwrap().0.abs() <= 1e-15);
        }

        #[test]
        fn focal_never_exceeds_cross_entropy(a in prop::collection::vec(0.01f64..1.0, 5), gamma in 0.0f64..5.0) {
            let s: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / s).collect();
            for k in 0..5 {
                let mut y = vec![0.0; 5];
                y[k] = 1.0;
                let ce = -p[k].ln();
                prop_assert!(focal(&y, &p, gamma).unwrap().0 <= ce + 1e-15);
            }
        }

        #[test]
        fn center_loss_translation_invariant(shift in prop::collection::vec(-5.0f64..5.0, 3), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_mat(6, 3, &mut rng);
            let c = Centers { centers: rand_mat(2, 3, &mut rng) };
            let labels = [0, 1, 1, 0, 0, 1];
            let sh = |m: &Matrix<f64>| {
                let mut o = m.clone();
                for i in 0..o.rows() { for (v, s) in o.row_mut(i).iter_mut().zip(&shift) { *v += s; } }
                o
            };
            let a = center_loss(&f, &labels, &c).unwrap().0;
            let b = center_loss(&sh(&f), &labels, &Centers { centers: sh(&c.centers) }).unwrap().0;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn context_broadcast_preserves_mean(seed in 0u64..1000, t in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_mat(t, 4, &mut rng);
            for (a, b) in context_broadcast(&x).col_means().iter().zip(x.col_means()) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }

        #[test]
        fn supcon_permutation_and_scale_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<_> = (0..4).map(|_| rand_mat(2, 3, &mut rng)).collect();
            let labels = [0, 1, 0, 1];
            let base = supcon(&frames, &labels, 0.2, true).unwrap().0;
            let order = [2, 0, 3, 1];
            let pf: Vec<_> = order.iter().map(|&i| frames[i].clone()).collect();
            let pl: Vec<_> = order.iter().map(|&i| labels[i]).collect();
            prop_assert!((supcon(&pf, &pl, 0.2, true).unwrap().0 - base).abs() < 1e-12);
            let scaled: Vec<_> = frames.iter().map(|m| {
                let s = rng.random_range(0.1..10.0);
                m.map(|v| v * s)
            }).collect();
            prop_assert!((supcon(&scaled, &labels, 0.2, true).unwrap().0 - base).abs() < 1e-12);
        }
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{context_broadcast, context_broadcast_backward, Centers};
use crate::nn::{
    aggregate, aggregate_backward, check_shape, Aggregation, AttentionWeighting, Linear, Matrix, MsaCache,
    MsaParams, NnError, PoolCache, PoolParams,
};
use crate::scalar::Scalar;

/// Architecture hyper-parameters; fixed for the lifetime of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frame feature width `D`.
    pub dim: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub aggregation: Aggregation,
    pub weighting: AttentionWeighting,
    /// Reuse the utterance projection for frame embeddings instead of a
    /// separate layer.
    pub shared_frame_projection: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.dim == 0 || self.proj_dim == 0 || self.n_classes < 2 {
            return Err(NnError::ShapeMismatch(format!(
                "need dim > 0, proj_dim > 0 and at least 2 classes (got {}, {}, {})",
                self.dim, self.proj_dim, self.n_classes
            )));
        }
        MsaParams::<f64>::zeros(self.dim, self.heads).map(|_| ())
    }
}

/// Which frame-level embeddings the forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutput {
    Skip,
    Raw,
    /// Projected frames followed by context broadcasting.
    Broadcast,
}

/// FLAM encoder, projection head, classifier and class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub msa: MsaParams<T>,
    pub pool: PoolParams<T>,
    /// `D → proj_dim`, feeds the center loss.
    pub projection: Linear<T>,
    /// `D → proj_dim` for SupCon frame embeddings; `None` when shared.
    pub frame_projection: Option<Linear<T>>,
    /// `D → classes`, reads the pooled feature.
    pub classifier: Linear<T>,
    pub centers: Centers<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x_prime: Matrix<T>,
    msa: MsaCache<T>,
    pool: PoolCache<T>,
    frames: FrameOutput,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    /// Aggregated utterance feature `f`.
    pub pooled: Vec<T>,
    pub f_low: Vec<T>,
    /// `T × proj_dim` frame embeddings when requested.
    pub frames: Option<Matrix<T>>,
    pub cache: ForwardCache<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let ModelConfig { dim, proj_dim, n_classes, .. } = config;
        let msa = MsaParams::init(dim, config.heads, rng)?;
        let pool = PoolParams::init(dim, rng);
        let projection = Linear::init(dim, proj_dim, rng);
        let frame_projection = (!config.shared_frame_projection).then(|| Linear::init(dim, proj_dim, rng));
        let classifier = Linear::init(dim, n_classes, rng);
        Ok(Self {
            config,
            msa,
            pool,
            projection,
            frame_projection,
            classifier,
            centers: Centers::zeros(n_classes, proj_dim),
        })
    }

    /// All-zero parameters; also the gradient accumulator shape.
    pub fn zeros(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let ModelConfig { dim, proj_dim, n_classes, .. } = config;
        Ok(Self {
            config,
            msa: MsaParams::zeros(dim, config.heads)?,
            pool: PoolParams::zeros(dim),
            projection: Linear::zeros(dim, proj_dim),
            frame_projection: (!config.shared_frame_projection).then(|| Linear::zeros(dim, proj_dim)),
            classifier: Linear::zeros(dim, n_classes),
            centers: Centers::zeros(n_classes, proj_dim),
        })
    }

    /// Adam-updated tensors in declaration order (everything but the centers).
    pub fn trainable_tensors(&self) -> Vec<&[T]> {
        let mut out = self.msa.tensors();
        out.push(&self.pool.fc_weight);
        out.push(std::slice::from_ref(&self.pool.fc_bias));
        out.push(self.projection.weight.data());
        out.push(&self.projection.bias);
        if let Some(fp) = &self.frame_projection {
            out.push(fp.weight.data());
            out.push(&fp.bias);
        }
        out.push(self.classifier.weight.data());
        out.push(&self.classifier.bias);
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.split_tensors_mut().0
    }

    fn split_tensors_mut(&mut self) -> (Vec<&mut [T]>, &mut [T]) {
        let Self {
            msa,
            pool,
            projection,
            frame_projection,
            classifier,
            centers,
            ..
        } = self;
        let mut out = msa.tensors_mut();
        out.push(&mut pool.fc_weight);
        out.push(std::slice::from_mut(&mut pool.fc_bias));
        out.push(projection.weight.data_mut());
        out.push(&mut projection.bias);
        if let Some(fp) = frame_projection {
            out.push(fp.weight.data_mut());
            out.push(&mut fp.bias);
        }
        out.push(classifier.weight.data_mut());
        out.push(&mut classifier.bias);
        (out, centers.centers.data_mut())
    }

    /// Every stored tensor, centers last.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.trainable_tensors();
        out.push(self.centers.centers.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let (mut out, centers) = self.split_tensors_mut();
        out.push(centers);
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.len()).sum()
    }

    /// Element-wise `self += other` over the trainable tensors.
    pub fn add_trainable(&mut self, other: &Self) {
        for (a, b) in self.trainable_tensors_mut().into_iter().zip(other.trainable_tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            msa: self.msa.cast(),
            pool: self.pool.cast(),
            projection: self.projection.cast(),
            frame_projection: self.frame_projection.as_ref().map(Linear::cast),
            classifier: self.classifier.cast(),
            centers: Centers {
                centers: self.centers.centers.cast(),
            },
        }
    }

    fn frame_layer(&self) -> &Linear<T> {
        self.frame_projection.as_ref().unwrap_or(&self.projection)
    }

    pub fn forward(&self, x: &Matrix<T>, frames: FrameOutput) -> Result<ForwardOutput<T>, NnError> {
        check_shape("features", x.shape(), (x.rows(), self.config.dim))?;
        let (x_prime, msa_cache) = self.msa.forward(x)?;
        let (pooled, pool_cache) = aggregate(self.config.aggregation, &x_prime, &self.pool, self.config.weighting)?;
        let f_low = self.projection.forward_vec(&pooled)?;
        let logits = self.classifier.forward_vec(&pooled)?;
        let frame_out = match frames {
            FrameOutput::Skip => None,
            FrameOutput::Raw => Some(self.frame_layer().forward(&x_prime)?),
            FrameOutput::Broadcast => Some(context_broadcast(&self.frame_layer().forward(&x_prime)?)),
        };
        Ok(ForwardOutput {
            logits,
            pooled,
            f_low,
            frames: frame_out,
            cache: ForwardCache {
                x_prime,
                msa: msa_cache,
                pool: pool_cache,
                frames,
            },
        })
    }

    /// Gradients of a scalar objective with respect to every trainable
    /// tensor, given its gradients with respect to this utterance's outputs.
    /// The returned centers are zero: they are not trained by gradient.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        out: &ForwardOutput<T>,
        d_logits: &[T],
        d_f_low: &[T],
        d_frames: Option<&Matrix<T>>,
    ) -> Result<Self, NnError> {
        let mut grads = Self::zeros(self.config)?;
        let cache = &out.cache;

        let g_cls = self.classifier.backward_vec(&out.pooled, d_logits)?;
        let g_proj = self.projection.backward_vec(&out.pooled, d_f_low)?;
        let mut d_pooled = g_cls.input.into_vec();
        for (d, &g) in d_pooled.iter_mut().zip(g_proj.input.data()) {
            *d += g;
        }
        grads.classifier = Linear { weight: g_cls.weight, bias: g_cls.bias };
        grads.projection = Linear { weight: g_proj.weight, bias: g_proj.bias };

        let g_pool = aggregate_backward(
            self.config.aggregation,
            &cache.x_prime,
            &self.pool,
            self.config.weighting,
            &cache.pool,
            &d_pooled,
        )?;
        grads.pool = g_pool.params;
        let mut d_x_prime = g_pool.input;

        if let Some(dz) = d_frames {
            let d_proj_out = match cache.frames {
                FrameOutput::Skip => {
                    return Err(NnError::ShapeMismatch(
                        "frame gradient supplied but forward skipped frame embeddings".into(),
                    ))
                }
                FrameOutput::Raw => dz.clone(),
                FrameOutput::Broadcast => context_broadcast_backward(dz),
            };
            let g_fp = self.frame_layer().backward(&cache.x_prime, &d_proj_out)?;
            d_x_prime.add_assign(&g_fp.input);
            match &mut grads.frame_projection {
                Some(fp) => {
                    fp.weight = g_fp.weight;
                    fp.bias = g_fp.bias;
                }
                None => {
                    grads.projection.weight.add_assign(&g_fp.weight);
                    for (b, g) in grads.projection.bias.iter_mut().zip(g_fp.bias) {
                        *b += g;
                    }
                }
            }
        }

        grads.msa = self.msa.backward(x, &cache.msa, &d_x_prime)?.params;
        Ok(grads)
    }

    /// Class with the largest logit (first on ties).
    pub fn predict(&self, x: &Matrix<T>) -> Result<usize, NnError> {
        Ok(argmax(&self.forward(x, FrameOutput::Skip)?.logits))
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;
    use crate::nn::grad_check;
    use crate::trainer::{batch_objective, Example, Workers};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(aggregation: Aggregation, weighting: AttentionWeighting, shared: bool) -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 16,
            proj_dim: 6,
            n_classes: 3,
            aggregation,
            weighting,
            shared_frame_projection: shared,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Example<f64>> {
        let targets = [vec![1.0, 0.0, 0.0], vec![0.2, 0.8, 0.0], vec![0.0, 0.0, 1.0], vec![0.6, 0.0, 0.4]];
        targets
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let frames = 2 + i % 3;
                let x = Matrix::from_vec(frames, dim, (0..frames * dim).map(|_| rng.random_range(-0.5..0.5)).collect())
                    .unwrap();
                Example::new(format!("u{i}"), x, t)
            })
            .collect()
    }

    fn check_composite(cfg: ModelConfig, frames: FrameOutput, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        params.pool.fc_bias = 0.3;
        for v in params.centers.centers.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        let data = batch(&mut rng, cfg.dim);
        let refs: Vec<&Example<f64>> = data.iter().collect();
        let loss_cfg = LossConfig { proj_dim: cfg.proj_dim, tau: 0.5, ..Default::default() };
        let workers = Workers::new(1).unwrap();
        let res = batch_objective(&params, &refs, &loss_cfg, frames, &workers).unwrap();
        let analytic: Vec<f64> = res.grads.trainable_tensors().concat();
        let mut flat: Vec<f64> = params.trainable_tensors().concat();
        let rep = grad_check(
            &mut flat,
            |v| {
                let mut p = params.clone();
                let mut it = v.iter();
                for t in p.trainable_tensors_mut() {
                    for slot in t {
                        *slot = *it.next().unwrap();
                    }
                }
                batch_objective(&p, &refs, &loss_cfg, frames, &workers).unwrap().report.total
            },
            &analytic,
            1e-5,
            1e-4,
        );
        assert!(rep.passed, "{cfg:?} {frames:?}: {rep}");
    }

    #[test]
    fn composite_gradient_flam() {
        check_composite(config(Aggregation::Flam, AttentionWeighting::Linear, false), FrameOutput::Broadcast, 1);
    }

    #[test]
    fn composite_gradient_variants() {
        check_composite(config(Aggregation::Flam, AttentionWeighting::Softmax, true), FrameOutput::Raw, 2);
        check_composite(config(Aggregation::MeanPool, AttentionWeighting::Linear, false), FrameOutput::Broadcast, 3);
        check_composite(config(Aggregation::MaxPool, AttentionWeighting::Linear, true), FrameOutput::Broadcast, 4);
    }

    #[test]
    fn single_frame_aggregations_agree_up_to_flam_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = config(Aggregation::MeanPool, AttentionWeighting::Softmax, false);
        let mut p = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = Matrix::from_vec(1, 16, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mean = p.forward(&x, FrameOutput::Skip).unwrap().pooled;
        p.config.aggregation = Aggregation::MaxPool;
        assert_eq!(p.forward(&x, FrameOutput::Skip).unwrap().pooled, mean);
        // Softmax over a single frame is exactly 1.
        p.config.aggregation = Aggregation::Flam;
        assert_eq!(p.forward(&x, FrameOutput::Skip).unwrap().pooled, mean);
    }

    #[test]
    fn zero_msa_meanpool_is_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = config(Aggregation::MeanPool, AttentionWeighting::Linear, false);
        let mut p = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        p.msa = MsaParams::zeros(16, 16).unwrap();
        let x = Matrix::from_vec(5, 16, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(p.forward(&x, FrameOutput::Skip).unwrap().pooled, x.col_means());
    }

    #[test]
    fn frame_gradient_requires_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = config(Aggregation::Flam, AttentionWeighting::Linear, false);
        let p = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = Matrix::zeros(2, 16);
        let out = p.forward(&x, FrameOutput::Skip).unwrap();
        let dz = Matrix::zeros(2, 6);
        assert!(p.backward(&x, &out, &[0.0; 3], &[0.0; 6], Some(&dz)).is_err());
    }
}

//! Model assembly, Adam training with a stepped learning-rate decay, and
//! WA/UA evaluation.

mod checkpoint;
mod model;
mod optim;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, params_from_bytes, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{argmax, ForwardCache, ForwardOutput, FrameOutput, ModelConfig, ModelParams};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eam::{MixConfig, MixupMode};
use crate::losses::{batch_loss, update_centers, BatchInputs, LossConfig, LossError, LossReport};
use crate::nn::{AttentionWeighting, Aggregation, Matrix, NnError, DEFAULT_HEADS};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("example '{id}': {reason}")]
    BadExample { id: String, reason: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One utterance: frame features plus its (possibly mixed) target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub features: Matrix<T>,
    /// Probability vector over classes.
    pub target: Vec<T>,
    /// Dominant class; used for evaluation, center loss and SupCon.
    pub label: usize,
}

impl<T: Scalar> Example<T> {
    pub fn new(id: impl Into<String>, features: Matrix<T>, target: Vec<T>) -> Self {
        let label = argmax(&target);
        Self {
            id: id.into(),
            features,
            target,
            label,
        }
    }

    pub fn one_hot(id: impl Into<String>, features: Matrix<T>, class: usize, n_classes: usize) -> Self {
        let mut target = vec![T::zero(); n_classes];
        target[class] = T::one();
        Self {
            id: id.into(),
            features,
            target,
            label: class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_lr: f64,
    pub center_lr: f64,
    pub decay: f64,
    /// Last epoch whose start applies a decay step.
    pub decay_until_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub heads: usize,
    pub aggregation: Aggregation,
    pub weighting: AttentionWeighting,
    pub shared_frame_projection: bool,
    /// Which upstream-augmented examples to train on; no mixing happens here.
    pub mixup: MixupMode,
    pub threads: usize,
    pub loss: LossConfig,
    pub mix: MixConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_lr: 1e-4,
            center_lr: 5e-3,
            decay: 0.875,
            decay_until_epoch: 20,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            heads: DEFAULT_HEADS,
            aggregation: Aggregation::Flam,
            weighting: AttentionWeighting::Linear,
            shared_frame_projection: false,
            mixup: MixupMode::Eam,
            threads: 1,
            loss: LossConfig::default(),
            mix: MixConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.model_lr >= 0.0 && self.model_lr.is_finite() && self.center_lr >= 0.0 && self.center_lr.is_finite()) {
            return bad(format!("learning rates must be >= 0 ({}, {})", self.model_lr, self.center_lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        self.loss.validate()?;
        self.mix
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, dim: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            dim,
            heads: self.heads,
            proj_dim: self.loss.proj_dim,
            n_classes,
            aggregation: self.aggregation,
            weighting: self.weighting,
            shared_frame_projection: self.shared_frame_projection,
        }
    }

    fn frame_output(&self) -> FrameOutput {
        if self.loss.lambdas[3] == 0.0 {
            FrameOutput::Skip
        } else if self.loss.cb_enabled {
            FrameOutput::Broadcast
        } else {
            FrameOutput::Raw
        }
    }
}

/// `lr0 · decay^min(epoch − 1, until)`; epoch is 1-based.
pub fn lr_schedule(lr0: f64, epoch: usize, decay: f64, until: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    lr0 * decay.powi((epoch - 1).min(until) as i32)
}

/// The default schedule: ×7/8 per epoch for the first 20 decays.
pub fn lr_at_epoch(lr0: f64, epoch: usize) -> f64 {
    lr_schedule(lr0, epoch, 0.875, 20)
}

/// Maps over batch items either inline or on a dedicated rayon pool.
/// Results come back in input order, so reductions are thread-count
/// independent.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self, TrainError> {
        if threads <= 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

/// Loss, summed parameter gradients and projected features for one batch.
pub struct BatchResult<T> {
    pub report: LossReport<T>,
    pub grads: ModelParams<T>,
    pub f_low: Matrix<T>,
    pub labels: Vec<usize>,
}

/// Forward, loss and backward over one batch without touching `params`.
pub fn batch_objective<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&Example<T>],
    loss_cfg: &LossConfig,
    frames: FrameOutput,
    workers: &Workers,
) -> Result<BatchResult<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let c = params.config.n_classes;
    for ex in batch {
        if ex.target.len() != c || ex.label >= c {
            return Err(TrainError::BadExample {
                id: ex.id.clone(),
                reason: format!("target has {} classes, model has {c}", ex.target.len()),
            });
        }
    }
    let outputs = workers
        .map(batch, |ex| params.forward(&ex.features, frames))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let b = batch.len();
    let p = params.config.proj_dim;
    let mut logits = Matrix::zeros(b, c);
    let mut targets = Matrix::zeros(b, c);
    let mut f_low = Matrix::zeros(b, p);
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
    for (i, (ex, out)) in batch.iter().zip(&outputs).enumerate() {
        logits.row_mut(i).copy_from_slice(&out.logits);
        targets.row_mut(i).copy_from_slice(&ex.target);
        f_low.row_mut(i).copy_from_slice(&out.f_low);
    }
    let frame_embeddings: Vec<Matrix<T>> = outputs.iter().filter_map(|o| o.frames.clone()).collect();

    let (report, g) = batch_loss(
        &BatchInputs {
            logits: &logits,
            targets: &targets,
            labels: &labels,
            f_low: &f_low,
            frames: &frame_embeddings,
            centers: &params.centers,
        },
        loss_cfg,
    )?;

    let jobs: Vec<usize> = (0..b).collect();
    let per_item = workers
        .map(&jobs, |&i| {
            params.backward(
                &batch[i].features,
                &outputs[i],
                g.logits.row(i),
                g.f_low.row(i),
                g.frames.get(i),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = ModelParams::zeros(params.config)?;
    for gi in &per_item {
        grads.add_trainable(gi);
    }
    Ok(BatchResult {
        report,
        grads,
        f_low,
        labels,
    })
}

/// Parameters, optimizer state and epoch counter of a training run.
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>) -> Self {
        let adam = Adam::new(params.trainable_tensors().iter().map(|t| t.len()));
        Self { params, adam, epoch: 0 }
    }
}

/// Runs one epoch of shuffled mini-batches and returns the size-weighted
/// mean loss report. A trailing batch with a single utterance is dropped.
pub fn train_epoch<T: Scalar, R: Rng + ?Sized>(
    data: &[Example<T>],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    workers: &Workers,
    rng: &mut R,
) -> Result<LossReport<T>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let epoch = state.epoch + 1;
    let model_lr = lr_schedule(cfg.model_lr, epoch, cfg.decay, cfg.decay_until_epoch);
    let center_lr = T::of(lr_schedule(cfg.center_lr, epoch, cfg.decay, cfg.decay_until_epoch));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut sum = LossReport::<T>::default();
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 && data.len() >= 2 {
            continue;
        }
        let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
        let res = batch_objective(&state.params, &batch, &cfg.loss, cfg.frame_output(), workers)?;
        state
            .adam
            .step(state.params.trainable_tensors_mut(), res.grads.trainable_tensors(), model_lr)?;
        update_centers(&mut state.params.centers, &res.f_low, &res.labels, center_lr)?;
        let w = T::of(batch.len() as f64);
        sum.kl += res.report.kl * w;
        sum.focal += res.report.focal * w;
        sum.center += res.report.center * w;
        sum.supcon += res.report.supcon * w;
        sum.total += res.report.total * w;
        seen += batch.len();
    }
    state.epoch = epoch;
    let n = T::of(seen.max(1) as f64);
    Ok(LossReport {
        kl: sum.kl / n,
        focal: sum.focal / n,
        center: sum.center / n,
        supcon: sum.supcon / n,
        total: sum.total / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Overall accuracy.
    pub wa: f64,
    /// Mean per-class recall over classes present in the set.
    pub ua: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// WA/UA from true and predicted classes.
pub fn score(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Evaluation, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        wa: correct as f64 / labels.len() as f64,
        ua: recalls.iter().sum::<f64>() / recalls.len() as f64,
        confusion,
        predictions: predictions.to_vec(),
    })
}

pub fn evaluate<T: Scalar>(
    data: &[Example<T>],
    params: &ModelParams<T>,
    workers: &Workers,
) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_classes = params.config.n_classes;
    if let Some(ex) = data.iter().find(|ex| ex.label >= n_classes) {
        return Err(TrainError::BadExample {
            id: ex.id.clone(),
            reason: format!("label {} outside 0..{n_classes}", ex.label),
        });
    }
    let predictions = workers
        .map(data, |ex| params.predict(&ex.features))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = data.iter().map(|ex| ex.label).collect();
    score(&labels, &predictions, n_classes)
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub kl: f64,
    pub focal: f64,
    pub center: f64,
    pub supcon: f64,
    pub total: f64,
    pub wa: f64,
    pub ua: f64,
}

/// Seeds a generator, initialises a model, trains for `cfg.epochs` and
/// evaluates on `eval` (or on `train` when `eval` is empty) after every
/// epoch. `on_epoch` sees each record as soon as it is produced.
pub fn fit<T: Scalar>(
    train: &[Example<T>],
    eval: &[Example<T>],
    n_classes: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainState<T>, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    let first = train.first().ok_or(TrainError::EmptyDataset)?;
    let dim = first.features.cols();
    if let Some(ex) = train.iter().chain(eval).find(|ex| ex.features.cols() != dim) {
        return Err(TrainError::BadExample {
            id: ex.id.clone(),
            reason: format!("{} features per frame, expected {dim}", ex.features.cols()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(cfg.model_config(dim, n_classes), &mut rng)?;
    let mut state = TrainState::new(params);
    let workers = Workers::new(cfg.threads)?;
    let eval_set = if eval.is_empty() { train } else { eval };
    let mut records = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let report = train_epoch(train, &mut state, cfg, &workers, &mut rng)?;
        let ev = evaluate(eval_set, &state.params, &workers)?;
        let rec = EpochRecord {
            epoch: state.epoch,
            lr: lr_schedule(cfg.model_lr, state.epoch, cfg.decay, cfg.decay_until_epoch),
            kl: report.kl.as_f64(),
            focal: report.focal.as_f64(),
            center: report.center.as_f64(),
            supcon: report.supcon.as_f64(),
            total: report.total.as_f64(),
            wa: ev.wa,
            ua: ev.ua,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok((state, records))
}

//! Seeded toy datasets of class-dependent Gaussian frame sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;
use crate::scalar::Scalar;
use crate::trainer::Example;

/// The default feature scale is small on purpose: unnormalised frame
/// attention makes the pooled feature quadratic in the frames, and at this
/// scale the initial logits are O(1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_utterances: usize,
    pub n_classes: usize,
    pub frames: usize,
    pub dim: usize,
    /// Standard deviation of the per-class mean vectors.
    pub mean_scale: f64,
    /// Standard deviation of the per-frame noise.
    pub noise_std: f64,
    /// Ratio between the largest and smallest class; 1 gives balanced
    /// classes, otherwise sizes fall off geometrically.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_utterances: 400,
            n_classes: 4,
            frames: 50,
            dim: 32,
            mean_scale: 0.05,
            noise_std: 0.05,
            imbalance: 1.0,
            seed: 0,
        }
    }
}

fn class_sizes(cfg: &ToyConfig) -> Vec<usize> {
    let k = cfg.n_classes;
    let weights: Vec<f64> = (0..k)
        .map(|c| {
            if k == 1 {
                1.0
            } else {
                cfg.imbalance.powf(-(c as f64) / (k - 1) as f64)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| ((w / total) * cfg.n_utterances as f64).floor().max(1.0) as usize)
        .collect();
    // Hand out the rounding remainder to the largest classes first.
    let mut c = 0;
    while sizes.iter().sum::<usize>() < cfg.n_utterances {
        sizes[c % k] += 1;
        c += 1;
    }
    sizes
}

/// Generates `n_utterances` one-hot examples; utterance ids are
/// `toy-00000`, `toy-00001`, … in class-major order.
pub fn toy_dataset<T: Scalar>(cfg: &ToyConfig) -> Vec<Example<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.dim).map(|_| cfg.mean_scale * std.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.n_utterances);
    for (class, &n) in class_sizes(cfg).iter().enumerate() {
        for _ in 0..n {
            let mut data = Vec::with_capacity(cfg.frames * cfg.dim);
            for _ in 0..cfg.frames {
                for &m in &means[class] {
                    data.push(T::of(m + cfg.noise_std * std.sample(&mut rng)));
                }
            }
            let features = Matrix::from_vec(cfg.frames, cfg.dim, data).expect("sized buffer");
            out.push(Example::one_hot(format!("toy-{:05}", out.len()), features, class, cfg.n_classes));
        }
    }
    out
}

/// Stratified split: within each class a seeded shuffle sends
/// `round(held_out · n_class)` examples to the second half.
pub fn stratified_split<T: Clone>(data: &[Example<T>], held_out: f64, seed: u64) -> (Vec<Example<T>>, Vec<Example<T>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = data.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == c).collect();
        idx.shuffle(&mut rng);
        let k = (held_out * idx.len() as f64).round() as usize;
        test.extend(idx[..k].iter().map(|&i| data[i].clone()));
        train.extend(idx[k..].iter().map(|&i| data[i].clone()));
    }
    (train, test)
}

/// Reassigns a `fraction` of examples to a uniformly drawn different class
/// and returns how many were changed.
pub fn inject_label_noise<T: Scalar, R: Rng + ?Sized>(
    data: &mut [Example<T>],
    fraction: f64,
    n_classes: usize,
    rng: &mut R,
) -> usize {
    let mut changed = 0;
    for ex in data.iter_mut() {
        if n_classes < 2 || !rng.random_bool(fraction.clamp(0.0, 1.0)) {
            continue;
        }
        let shift = rng.random_range(1..n_classes);
        let new = (ex.label + shift) % n_classes;
        *ex = Example::one_hot(ex.id.clone(), ex.features.clone(), new, n_classes);
        changed += 1;
    }
    changed
}

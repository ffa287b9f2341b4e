use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{dot, softmax, softmax_backward, Matrix, NnError};

/// FC layer scoring each frame for frame-attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams<T> {
    pub fc_weight: Vec<T>,
    pub fc_bias: T,
}

/// How frame scores `a = X'·w + b` become pooling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionWeighting {
    /// Raw scores, no normalisation.
    #[default]
    Linear,
    /// Softmax over frames.
    Softmax,
}

/// Utterance-level feature aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Flam,
    MaxPool,
    MeanPool,
}

impl Aggregation {
    pub fn code(self) -> u32 {
        match self {
            Self::Flam => 0,
            Self::MaxPool => 1,
            Self::MeanPool => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Self::Flam),
            1 => Some(Self::MaxPool),
            2 => Some(Self::MeanPool),
            _ => None,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flam => "flam",
            Self::MaxPool => "maxpool",
            Self::MeanPool => "meanpool",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flam" => Ok(Self::Flam),
            "maxpool" => Ok(Self::MaxPool),
            "meanpool" => Ok(Self::MeanPool),
            other => Err(format!("unknown aggregation '{other}' (flam|maxpool|meanpool)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    /// Per-frame pooling weights actually applied.
    pub weights: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct PoolGrads<T> {
    pub params: PoolParams<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> PoolParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            fc_weight: vec![T::zero(); dim],
            fc_bias: T::zero(),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let w = Matrix::<T>::glorot(dim, 1, rng);
        Self {
            fc_weight: w.into_vec(),
            fc_bias: T::zero(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PoolParams<U> {
        PoolParams {
            fc_weight: self.fc_weight.iter().map(|v| U::of(v.as_f64())).collect(),
            fc_bias: U::of(self.fc_bias.as_f64()),
        }
    }
}

fn nonempty<T: Scalar>(x: &Matrix<T>) -> Result<(), NnError> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(NnError::ShapeMismatch("pooling needs at least one frame".into()));
    }
    Ok(())
}

/// `f = X'ᵀ · a` with `a = X'·w + b` (optionally softmaxed over frames).
pub fn frame_attention_pool<T: Scalar>(
    xp: &Matrix<T>,
    p: &PoolParams<T>,
    weighting: AttentionWeighting,
) -> Result<(Vec<T>, PoolCache<T>), NnError> {
    nonempty(xp)?;
    if p.fc_weight.len() != xp.cols() {
        return Err(NnError::ShapeMismatch(format!(
            "pool weight has length {}, frames have {} features",
            p.fc_weight.len(),
            xp.cols()
        )));
    }
    let scores: Vec<T> = (0..xp.rows())
        .map(|t| dot(xp.row(t), &p.fc_weight) + p.fc_bias)
        .collect();
    let weights = match weighting {
        AttentionWeighting::Linear => scores,
        AttentionWeighting::Softmax => softmax(&scores),
    };
    let f = weighted_sum(xp, &weights);
    Ok((f, PoolCache { weights }))
}

pub fn frame_attention_pool_backward<T: Scalar>(
    xp: &Matrix<T>,
    p: &PoolParams<T>,
    weighting: AttentionWeighting,
    cache: &PoolCache<T>,
    d_f: &[T],
) -> Result<PoolGrads<T>, NnError> {
    nonempty(xp)?;
    if d_f.len() != xp.cols() || cache.weights.len() != xp.rows() {
        return Err(NnError::ShapeMismatch("pool backward shapes".into()));
    }
    let d_weights: Vec<T> = (0..xp.rows()).map(|t| dot(xp.row(t), d_f)).collect();
    let d_scores = match weighting {
        AttentionWeighting::Linear => d_weights,
        AttentionWeighting::Softmax => softmax_backward(&cache.weights, &d_weights),
    };
    let mut input = Matrix::zeros(xp.rows(), xp.cols());
    let mut fc_weight = vec![T::zero(); xp.cols()];
    let mut fc_bias = T::zero();
    for t in 0..xp.rows() {
        let (alpha, ds) = (cache.weights[t], d_scores[t]);
        for (d, row_in) in input.row_mut(t).iter_mut().enumerate() {
            *row_in = alpha * d_f[d] + ds * p.fc_weight[d];
        }
        for (g, &x) in fc_weight.iter_mut().zip(xp.row(t)) {
            *g += ds * x;
        }
        fc_bias += ds;
    }
    Ok(PoolGrads {
        params: PoolParams { fc_weight, fc_bias },
        input,
    })
}

fn weighted_sum<T: Scalar>(x: &Matrix<T>, weights: &[T]) -> Vec<T> {
    let mut f = vec![T::zero(); x.cols()];
    for (t, &w) in weights.iter().enumerate() {
        for (o, &v) in f.iter_mut().zip(x.row(t)) {
            *o += w * v;
        }
    }
    f
}

pub fn max_pool<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    (0..x.cols())
        .map(|d| (0..x.rows()).map(|t| x[(t, d)]).fold(T::neg_infinity(), T::max))
        .collect()
}

/// Routes each column's gradient to its first arg-max frame.
pub fn max_pool_backward<T: Scalar>(x: &Matrix<T>, d_f: &[T]) -> Matrix<T> {
    let mut d = Matrix::zeros(x.rows(), x.cols());
    for (c, &g) in d_f.iter().enumerate() {
        let mut best = 0;
        for t in 1..x.rows() {
            if x[(t, c)] > x[(best, c)] {
                best = t;
            }
        }
        d[(best, c)] = g;
    }
    d
}

pub fn mean_pool<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    x.col_means()
}

pub fn mean_pool_backward<T: Scalar>(frames: usize, d_f: &[T]) -> Matrix<T> {
    let inv = T::one() / T::of(frames as f64);
    let mut d = Matrix::zeros(frames, d_f.len());
    for t in 0..frames {
        for (o, &g) in d.row_mut(t).iter_mut().zip(d_f) {
            *o = g * inv;
        }
    }
    d
}

/// Dispatches to the configured aggregation. The cache is empty for the
/// parameter-free poolers.
pub fn aggregate<T: Scalar>(
    mode: Aggregation,
    xp: &Matrix<T>,
    p: &PoolParams<T>,
    weighting: AttentionWeighting,
) -> Result<(Vec<T>, PoolCache<T>), NnError> {
    nonempty(xp)?;
    match mode {
        Aggregation::Flam => frame_attention_pool(xp, p, weighting),
        Aggregation::MaxPool => Ok((max_pool(xp), PoolCache { weights: Vec::new() })),
        Aggregation::MeanPool => Ok((mean_pool(xp), PoolCache { weights: Vec::new() })),
    }
}

pub fn aggregate_backward<T: Scalar>(
    mode: Aggregation,
    xp: &Matrix<T>,
    p: &PoolParams<T>,
    weighting: AttentionWeighting,
    cache: &PoolCache<T>,
    d_f: &[T],
) -> Result<PoolGrads<T>, NnError> {
    match mode {
        Aggregation::Flam => frame_attention_pool_backward(xp, p, weighting, cache, d_f),
        Aggregation::MaxPool => Ok(PoolGrads {
            params: PoolParams::zeros(xp.cols()),
            input: max_pool_backward(xp, d_f),
        }),
        Aggregation::MeanPool => Ok(PoolGrads {
            params: PoolParams::zeros(xp.cols()),
            input: mean_pool_backward(xp.rows(), d_f),
        }),
    }
}

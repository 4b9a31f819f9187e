//! Classification objectives on speaker embeddings: softmax cross-entropy
//! and the additive-margin softmax over cosine similarities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Graph, Tensor, TensorError, Var, L2_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Loss selector stored with a model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    AmSoftmax { margin: f64, scale: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::AmSoftmax {
            margin: AmSoftmaxConfig::DEFAULT_MARGIN,
            scale: AmSoftmaxConfig::DEFAULT_SCALE,
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            LossKind::Softmax => Ok(()),
            LossKind::AmSoftmax { margin, scale } => AmSoftmaxConfig::new(margin, scale, 2)
                .map(|_| ())
                .map_err(|e| e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmSoftmaxConfig {
    pub margin: f64,
    pub scale: f64,
    pub num_classes: usize,
}

impl AmSoftmaxConfig {
    pub const DEFAULT_MARGIN: f64 = 0.4;
    pub const DEFAULT_SCALE: f64 = 30.0;

    pub fn new(margin: f64, scale: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&margin) {
            return Err(LossError::Config(format!("margin {margin} outside [0, 1)")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(LossError::Config(format!("scale {scale} must be positive")));
        }
        if num_classes < 2 {
            return Err(LossError::Config(format!("{num_classes} classes, need at least 2")));
        }
        Ok(Self {
            margin,
            scale,
            num_classes,
        })
    }

    pub fn with_defaults(num_classes: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_MARGIN, Self::DEFAULT_SCALE, num_classes)
    }
}

/// Loss node plus the number of feature rows that hit the zero-norm guard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOutput {
    pub loss: Var,
    pub degenerate_features: usize,
}

/// Mean cross-entropy of `n x C` logits.
pub fn softmax_ce<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.softmax_ce(logits, labels)?)
}

/// Cosine similarities between L2-normalized rows of `features` (`n x D`)
/// and of `weights` (`C x D`).
pub fn cosine_logits<T: Float>(g: &mut Graph<T>, features: Var, weights: Var) -> Result<(Var, usize)> {
    let degenerate = zero_rows(g.value(features));
    let x = g.l2_normalize(features, 1)?;
    let w = g.l2_normalize(weights, 1)?;
    let wt = g.transpose(w)?;
    Ok((g.linear(x, wt, None)?, degenerate))
}

fn zero_rows<T: Float>(t: &Tensor<T>) -> usize {
    let d = *t.shape().last().unwrap();
    let eps = T::from_f64_lossy(L2_EPS);
    t.data()
        .chunks_exact(d)
        .filter(|row| row.iter().map(|v| v.powi(2)).sum::<T>().sqrt() <= eps)
        .count()
}

/// Additive-margin softmax: cross-entropy over `s * (cos - m * onehot)`.
pub fn am_softmax<T: Float>(
    g: &mut Graph<T>,
    features: Var,
    weights: Var,
    labels: &[usize],
    cfg: &AmSoftmaxConfig,
) -> Result<LossOutput> {
    let ws = g.shape(weights);
    if ws.len() != 2 || ws[0] != cfg.num_classes {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "am_softmax",
            detail: format!("weights {ws:?} for {} classes", cfg.num_classes),
        }));
    }
    let (cos, degenerate_features) = cosine_logits(g, features, weights)?;
    let logits = g.margin_scale(
        cos,
        labels,
        T::from_f64_lossy(cfg.margin),
        T::from_f64_lossy(cfg.scale),
    )?;
    Ok(LossOutput {
        loss: g.softmax_ce(logits, labels)?,
        degenerate_features,
    })
}

/// Forward-only [`softmax_ce`] on plain tensors.
pub fn softmax_ce_value<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::inference();
    let l = g.constant(logits.clone());
    let out = softmax_ce(&mut g, l, labels)?;
    Ok(g.data(out)[0])
}

/// Forward-only [`am_softmax`] on plain tensors.
pub fn am_softmax_value<T: Float>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    labels: &[usize],
    cfg: &AmSoftmaxConfig,
) -> Result<T> {
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let w = g.constant(weights.clone());
    let out = am_softmax(&mut g, f, w, labels, cfg)?;
    Ok(g.data(out.loss)[0])
}

use super::{Result, TrainError};
use crate::model::OptimizerSnapshot;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Self { config, step: 0, m, v }
    }

    pub fn snapshot(&self, shapes: &[Vec<usize>]) -> Result<OptimizerSnapshot<T>> {
        let wrap = |xs: &[Vec<T>]| -> Result<Vec<Tensor<T>>> {
            xs.iter()
                .zip(shapes)
                .map(|(x, s)| Tensor::new(s.clone(), x.clone()).map_err(TrainError::from))
                .collect()
        };
        Ok(OptimizerSnapshot {
            step: self.step,
            first_moment: wrap(&self.m)?,
            second_moment: wrap(&self.v)?,
        })
    }

    pub fn from_snapshot(config: AdamConfig, snap: &OptimizerSnapshot<T>) -> Self {
        Self {
            config,
            step: snap.step,
            m: snap.first_moment.iter().map(|t| t.data().to_vec()).collect(),
            v: snap.second_moment.iter().map(|t| t.data().to_vec()).collect(),
        }
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before
/// parameters or moments change.
pub fn adam_step<T: Float>(params: &mut [&mut Tensor<T>], grads: &[&[T]], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(TrainError::Config(format!("adam: size mismatch at parameter {i}")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let cv = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, one) = (cv(beta1), cv(beta2), T::one());
    let (step_size, c2s, eps) = (cv(lr / c1), cv(c2.sqrt()), cv(eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *w = *w - step_size * *mi / ((*vi).sqrt() / c2s + eps);
        }
    }
    Ok(())
}

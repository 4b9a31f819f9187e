//! Batch normalization over every axis except the trailing channel axis.

use super::Float;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel batch mean and population variance observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> BatchStats<T> {
    /// Folds these statistics into running buffers with the fixed momentum.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T]) {
        let keep = T::from_f64_lossy(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, m) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + take * *m;
        }
        for (r, v) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + take * *v;
        }
    }
}

pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

pub(crate) fn batchnorm_forward<T: Float>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> BnForward<T> {
    let rows = x.len() / channels;
    let eps = T::from_f64_lossy(BN_EPS);
    let (mean, var, stats) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); channels];
            for row in x.chunks_exact(channels) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m = *m + *v;
                }
            }
            let inv_rows = T::one() / T::from_usize(rows).unwrap();
            mean.iter_mut().for_each(|m| *m = *m * inv_rows);
            let mut var = vec![T::zero(); channels];
            for row in x.chunks_exact(channels) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = *v - *m;
                    *s = *s + d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s * inv_rows);
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((row, xh), o) in x
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(out.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            let h = (row[c] - mean[c]) * inv_std[c];
            xh[c] = h;
            o[c] = gamma[c] * h + beta[c];
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        stats,
    }
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn batchnorm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    mode: BatchNormMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = gamma.len();
    let rows = dy.len() / channels;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for (d, h) in dy.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            dgamma[c] = dgamma[c] + d[c] * h[c];
            dbeta[c] = dbeta[c] + d[c];
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    match mode {
        BatchNormMode::Eval => {
            for (o, d) in dx.chunks_exact_mut(channels).zip(dy.chunks_exact(channels)) {
                for c in 0..channels {
                    o[c] = d[c] * gamma[c] * inv_std[c];
                }
            }
        }
        BatchNormMode::Train => {
            let m = T::from_usize(rows).unwrap();
            let scale: Vec<T> = (0..channels).map(|c| gamma[c] * inv_std[c] / m).collect();
            for ((o, d), h) in dx
                .chunks_exact_mut(channels)
                .zip(dy.chunks_exact(channels))
                .zip(xhat.chunks_exact(channels))
            {
                for c in 0..channels {
                    o[c] = scale[c] * (m * d[c] - dbeta[c] - h[c] * dgamma[c]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_update_uses_momentum() {
        let stats = BatchStats {
            mean: vec![1.0f64],
            var: vec![3.0],
        };
        let mut m = [0.0];
        let mut v = [1.0];
        stats.update_running(&mut m, &mut v);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64).powi(2) * 0.1).collect();
        let fwd = batchnorm_forward(&x, 3, &[1.0; 3], &[0.0; 3], None);
        for c in 0..3 {
            let col: Vec<f64> = fwd.out.iter().skip(c).step_by(3).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

//! Central-difference verification of analytic gradients (64-bit only).

use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of [`grad_check`]: the worst relative error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements left out because `x ± eps` straddles a ReLU or maxpool kink.
    pub skipped_at_kinks: usize,
    /// Elements where both gradients lie below the finite-difference
    /// roundoff bound; these are compared absolutely against that bound.
    pub below_noise: usize,
    /// Largest `|analytic - fd| / bound` over `below_noise` elements.
    pub below_noise_worst_ratio: f64,
    /// The relative-error formula applied to every compared element,
    /// including those below the roundoff bound.
    pub raw_max_rel_error: f64,
    pub noise_bound: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.below_noise_worst_ratio <= 1.0
    }
}

/// Roundoff bound on a central difference of an objective of size `f`.
pub fn fd_noise_bound(f: f64, eps: f64) -> f64 {
    100.0 * f64::EPSILON * f.abs().max(1.0) / eps
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], tracking: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = if tracking { Graph::new() } else { Graph::inference() };
    let mut g = g.with_branch_signature();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalarOutput(g.shape(out).to_vec()));
    }
    let v = g.data(out)[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok((g, vars, out))
}

/// Compares the analytic gradient of a scalar computation against central
/// differences with step `eps`, over every element of every input.
///
/// Elements whose perturbed evaluations take a different ReLU or maxpool
/// branch than the base point are skipped and counted, since a central
/// difference across a kink does not estimate the derivative. Elements
/// where both gradients fall below the roundoff bound of the difference
/// quotient cannot be resolved relatively and are compared absolutely.
///
/// The error per element is `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_subset(f, inputs, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `max_per_input` elements of each
/// input, chosen uniformly without replacement from a `seed`-ed stream.
pub fn grad_check_subset<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    let base = g.branch_signature();
    let noise = fd_noise_bound(g.data(out)[0], eps);
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
        below_noise: 0,
        below_noise_worst_ratio: 0.0,
        raw_max_rel_error: 0.0,
        noise_bound: noise,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        let picked: Vec<usize> = if grads.len() <= max_per_input {
            (0..grads.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, grads.len(), max_per_input).into_vec()
        };
        for idx in picked {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + eps;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            let plus = gp.data(op)[0];
            work[ti].data_mut()[idx] = orig - eps;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            let minus = gm.data(om)[0];
            work[ti].data_mut()[idx] = orig;
            if gp.branch_signature() != base || gm.branch_signature() != base {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[idx];
            if !a.is_finite() {
                return Err(TensorError::NonFinite(format!("analytic gradient of input {ti}[{idx}]")));
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.raw_max_rel_error = report.raw_max_rel_error.max(rel);
            if a.abs().max(numeric.abs()) <= noise {
                report.below_noise += 1;
                report.below_noise_worst_ratio = report.below_noise_worst_ratio.max((a - numeric).abs() / noise);
                continue;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = ti;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);

        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn straddled_kink_is_skipped() {
        let x = Tensor::new([2], vec![3e-6, 1.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped_at_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn vanishing_gradient_is_compared_absolutely() {
        let x = Tensor::new([2], vec![0.5, 2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                let s = g.sum(v[0]);
                let zs = g.sum(z);
                g.add(s, zs)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.below_noise, 0);
        let y = Tensor::new([1], vec![3.0]).unwrap();
        let report = grad_check(|g, v| Ok(g.scale(v[0], 0.0)), &[y], 1e-5).unwrap();
        assert_eq!(report.below_noise, 1);
        assert!(report.passed(1e-4));
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new([2], vec![-1.0, 1.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|_, v| Ok(v[0]), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarOutput(_)));
    }
}

use super::{EvalError, Result};

/// Verification trial scores with same-speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    /// Requires equal lengths, finite scores, and both classes present.
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(EvalError::Invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::Invalid(format!("score {i} is not finite")));
        }
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            return Err(EvalError::Invalid("need at least one target and one non-target trial".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    /// Accept when `score >= threshold`.
    pub threshold: f64,
}

/// Equal error rate by linear interpolation of the FAR and FRR curves.
///
/// Thresholds run over the distinct scores in descending order, starting
/// from a sentinel above the maximum where nothing is accepted. The EER is
/// taken where `FAR - FRR` first becomes non-negative, interpolating
/// between the two bracketing operating points.
pub fn compute_eer(set: &ScoreSet) -> EerResult {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let n_pos = set.labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = set.len() as f64 - n_pos;
    // (threshold, far, frr) with accept = score >= threshold.
    let mut points = vec![(f64::INFINITY, 0.0, 1.0)];
    let (mut fa, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == t {
            if set.labels[idx[i]] {
                tp += 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        points.push((t, fa as f64 / n_neg, (n_pos - tp as f64) / n_pos));
    }
    let k = points
        .iter()
        .position(|&(_, far, frr)| far - frr >= 0.0)
        .expect("last point accepts everything");
    let (tb, far_b, frr_b) = points[k];
    let db = far_b - frr_b;
    if db == 0.0 || k == 0 {
        return EerResult { eer: far_b, threshold: tb };
    }
    let (ta, far_a, frr_a) = points[k - 1];
    let da = far_a - frr_a;
    let eer = (far_a * frr_b - far_b * frr_a) / (da - db);
    let w = da / (da - db);
    let threshold = if ta.is_finite() { ta + w * (tb - ta) } else { tb };
    EerResult { eer, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[bool]) -> ScoreSet {
        ScoreSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation_gives_zero() {
        let r = compute_eer(&set(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]));
        assert_eq!(r.eer, 0.0);
    }

    #[test]
    fn full_inversion_gives_one() {
        let r = compute_eer(&set(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]));
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn tied_scores_give_half() {
        let r = compute_eer(&set(&[0.5; 4], &[true, false, true, false]));
        assert!((r.eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(ScoreSet::new(vec![0.1], vec![true]).is_err());
        assert!(ScoreSet::new(vec![0.1, f64::NAN], vec![true, false]).is_err());
        assert!(ScoreSet::new(vec![0.1], vec![true, false]).is_err());
    }
}

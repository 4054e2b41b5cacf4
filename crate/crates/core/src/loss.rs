//! Joint objective: weighted cross-entropy over the known classes plus the
//! soft nearest neighbor loss on the margin-shifted cosine similarity matrix.
//!
//! For an anchor `i` with in-batch positives `P(i)`:
//!
//! ```text
//! l_i = -log( Σ_{j∈P(i)} exp(-S_ij/τ) / (Σ_{k≠i} exp(-S_ik/τ) + ε) )
//! ```
//!
//! and the contrastive part is the mean of `l_i` over anchors with a
//! non-empty `P(i)`. All exponentials are evaluated relative to the row
//! maximum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError, DEFAULT_MARGIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no anchor in the batch has a same-label partner")]
    EmptyObjective,
    #[error("label {label} out of range for {classes} logits")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Temperature of the soft nearest neighbor loss.
    pub tau: f64,
    pub margin: f64,
    /// Added to the denominator of every anchor term.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, tau: 1.0, margin: DEFAULT_MARGIN, epsilon: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(LossError::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(LossError::InvalidConfig(format!(
                "epsilon must be in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Value and gradients of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub cl_part: f64,
    /// d total / d representation, one row per batch entry.
    pub grad_reps: Vec<Vec<f64>>,
    /// d total / d logits, one row per anchor (already scaled by alpha).
    pub grad_logits: Vec<Vec<f64>>,
}

/// Soft nearest neighbor loss and its gradient with respect to the raw
/// (unnormalized) representations.
///
/// Only `tau > 0` and `epsilon >= 0` are required here; `alpha` is unused.
pub fn snl_loss<R: AsRef<[f64]>>(
    reps: &[R],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(LossError::InvalidConfig(format!("tau must be > 0, got {}", cfg.tau)));
    }
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(LossError::InvalidConfig(format!("epsilon must be >= 0, got {}", cfg.epsilon)));
    }
    let sim = numerics::margin_similarity_matrix(reps, labels, cfg.margin)?;
    let n = reps.len();
    let dim = reps[0].as_ref().len();
    let norms: Vec<f64> = reps.iter().map(|r| numerics::norm(r.as_ref())).collect();
    let units: Vec<Vec<f64>> = reps
        .iter()
        .zip(&norms)
        .map(|(r, &nr)| r.as_ref().iter().map(|v| v / nr).collect())
        .collect();

    let active: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if active.is_empty() {
        return Err(LossError::EmptyObjective);
    }
    let scale = 1.0 / active.len() as f64;

    let mut loss = 0.0;
    // dL/dS_ik accumulated per anchor row
    let mut grad_sim = vec![0.0; n * n];
    let mut logits = vec![0.0; n];
    for &i in &active {
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                logits[k] = -sim.get(i, k) / cfg.tau;
                max = max.max(logits[k]);
            }
        }
        let max_pos = (0..n)
            .filter(|&k| k != i && labels[k] == labels[i])
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            den += (logits[k] - max).exp();
            if labels[k] == labels[i] {
                num += (logits[k] - max_pos).exp();
            }
        }
        let log_num = max_pos + num.ln();
        let log_den = log_add_exp(max + den.ln(), cfg.epsilon.ln());
        loss += scale * (log_den - log_num);
        for k in 0..n {
            if k == i {
                continue;
            }
            let p_den = (logits[k] - log_den).exp();
            let p_num = if labels[k] == labels[i] { (logits[k] - log_num).exp() } else { 0.0 };
            grad_sim[i * n + k] = scale * (p_num - p_den) / cfg.tau;
        }
    }

    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for k in 0..n {
            let g = grad_sim[i * n + k];
            if g == 0.0 {
                continue;
            }
            let c = sim.cosine(i, k);
            for t in 0..dim {
                grads[i][t] += g * (units[k][t] - c * units[i][t]) / norms[i];
                grads[k][t] += g * (units[i][t] - c * units[k][t]) / norms[k];
            }
        }
    }
    Ok((loss, grads))
}

/// `ln(e^a + e^b)`; `b = -inf` (ε = 0) passes `a` through.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Mean negative log-softmax of the true class, with gradient
/// `(softmax - onehot) / N`.
pub fn cross_entropy<R: AsRef<[f64]>>(
    logits: &[R],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::Shape { what: "labels", expected: logits.len(), got: labels.len() });
    }
    if logits.is_empty() {
        return Err(LossError::Shape { what: "logit rows", expected: 1, got: 0 });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        let row = row.as_ref();
        if y >= row.len() {
            return Err(LossError::LabelOutOfRange { label: y, classes: row.len() });
        }
        numerics::check_finite(row)?;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[y]) / n;
        let g = row
            .iter()
            .enumerate()
            .map(|(c, v)| ((v - log_z).exp() - if c == y { 1.0 } else { 0.0 }) / n)
            .collect();
        grads.push(g);
    }
    Ok((loss, grads))
}

/// `alpha · CE(anchors) + SNL(full batch)`.
///
/// The first `logits.len()` rows of `reps` are the anchors; the remaining
/// rows are sampled counterparts and only enter the contrastive term.
pub fn joint_loss<R: AsRef<[f64]>, L: AsRef<[f64]>>(
    reps: &[R],
    logits: &[L],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    if labels.len() != reps.len() {
        return Err(LossError::Shape { what: "labels", expected: reps.len(), got: labels.len() });
    }
    if logits.len() > reps.len() {
        return Err(LossError::Shape { what: "logit rows", expected: reps.len(), got: logits.len() });
    }
    let (ce_part, mut grad_logits) = cross_entropy(logits, &labels[..logits.len()])?;
    for row in &mut grad_logits {
        row.iter_mut().for_each(|g| *g *= cfg.alpha);
    }
    let (cl_part, grad_reps) = snl_loss(reps, labels, cfg)?;
    Ok(LossValue { total: cfg.alpha * ce_part + cl_part, ce_part, cl_part, grad_reps, grad_logits })
}

/// Cross-entropy only; used by the ablation without the contrastive term.
pub fn cross_entropy_only<R: AsRef<[f64]>, L: AsRef<[f64]>>(
    reps: &[R],
    logits: &[L],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    let (ce_part, mut grad_logits) = cross_entropy(logits, &labels[..logits.len()])?;
    for row in &mut grad_logits {
        row.iter_mut().for_each(|g| *g *= cfg.alpha);
    }
    let dim = reps.first().map_or(0, |r| r.as_ref().len());
    Ok(LossValue {
        total: cfg.alpha * ce_part,
        ce_part,
        cl_part: 0.0,
        grad_reps: vec![vec![0.0; dim]; reps.len()],
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64, margin: f64, epsilon: f64) -> LossConfig {
        LossConfig { alpha: 1.0, tau, margin, epsilon }
    }

    #[test]
    fn duplicated_pair_has_near_zero_loss() {
        let z = [vec![0.3, -1.2, 0.5], vec![0.3, -1.2, 0.5]];
        let (l, g) = snl_loss(&z, &[4, 4], &cfg(1.0, 0.3, 1e-8)).unwrap();
        assert!(l >= 0.0 && l <= 1e-6, "{l}");
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn three_point_hand_value() {
        // anchors 0 and 2 each see one positive (S = 1) and one negative (S = 0 - 0.3);
        // anchor 1 has no positive and is dropped.
        let z = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let (l, _) = snl_loss(&z, &[0, 1, 0], &cfg(1.0, 0.3, 0.0)).unwrap();
        let per_anchor = -((-1.0f64).exp() / ((-1.0f64).exp() + 0.3f64.exp())).ln();
        assert!((l - per_anchor).abs() < 1e-12);
        assert!((l - 1.5410).abs() < 1e-4);
    }

    #[test]
    fn no_positive_anywhere_is_an_error() {
        let z = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(snl_loss(&z, &[0, 1], &LossConfig::default()), Err(LossError::EmptyObjective));
    }

    #[test]
    fn overflow_safe_at_small_temperature() {
        let z = [vec![1.0, 0.0], vec![-1.0, 0.1], vec![0.9, 0.2], vec![-0.8, 0.3]];
        let (l, g) = snl_loss(&z, &[0, 1, 0, 1], &cfg(1e-3, 0.3, 1e-8)).unwrap();
        assert!(l.is_finite());
        assert!(g.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&[vec![0.0; 4]], &[2]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[vec![1e4, 0.0, 0.0]], &[0]).unwrap();
        assert!(l < 1e-12);
        let (l, g) = cross_entropy(&[vec![2.0, 0.0], vec![0.0, 2.0]], &[0, 1]).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((g[0][0] - (p - 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(
            cross_entropy(&[vec![0.0, 0.0]], &[2]),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn joint_loss_composition() {
        let z = [vec![1.0, 0.2], vec![0.1, 1.0], vec![0.9, 0.0], vec![0.0, 0.8]];
        let logits = [vec![0.5, -0.5], vec![0.2, 0.1]];
        let y = [0, 1, 0, 1];
        let zero_alpha = LossConfig { alpha: 0.0, ..LossConfig::default() };
        let v = joint_loss(&z, &logits, &y, &zero_alpha).unwrap();
        assert_eq!(v.total, v.cl_part);
        assert!(v.grad_logits.iter().flatten().all(|&g| g == 0.0));

        let one_class = [vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let v = joint_loss(&one_class, &[vec![0.3, 0.1]], &[0, 0, 0], &LossConfig::default()).unwrap();
        assert!((v.total - v.ce_part).abs() < 1e-6);

        let v = joint_loss(&z, &logits, &y, &LossConfig::default()).unwrap();
        assert!((v.total - (v.ce_part + v.cl_part)).abs() < 1e-12);
        assert_eq!(v.grad_logits.len(), 2);
        assert_eq!(v.grad_reps.len(), 4);
    }

    #[test]
    fn snl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(3..=6);
            let d = rng.random_range(2..=8);
            let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            y[1] = y[0];
            y[2] = (y[0] + 1) % 3;
            let z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = cfg(rng.random_range(0.2..2.0), rng.random_range(0.0..0.6), 1e-8);
            let rows = |flat: &[f64]| flat.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
            let (_, g) = snl_loss(&rows(&z), &y, &c).unwrap();
            let analytic: Vec<f64> = g.into_iter().flatten().collect();
            let fd = finite_difference_gradient(|p| snl_loss(&rows(p), &y, &c).unwrap().0, &z, 1e-6).unwrap();
            let err = relative_error(&analytic, &fd);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
        let y = [2, 0];
        let rows = |flat: &[f64]| flat.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let (_, g) = cross_entropy(&rows(&logits), &y).unwrap();
        let fd = finite_difference_gradient(|p| cross_entropy(&rows(p), &y).unwrap().0, &logits, 1e-6).unwrap();
        let analytic: Vec<f64> = g.into_iter().flatten().collect();
        assert!(relative_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 1e-2, ..Default::default() }.validate().is_err());
    }

    fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (3usize..8, 1usize..6).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn snl_bounded_below((z, mut y) in batch(), tau in 0.1f64..3.0) {
            prop_assume!(z.iter().all(|r| numerics::norm(r) > 1e-3));
            y[1] = y[0];
            let (l, _) = snl_loss(&z, &y, &cfg(tau, 0.3, 1e-8)).unwrap();
            prop_assert!(l >= -1e-9);
        }

        #[test]
        fn snl_monotone_in_margin((z, mut y) in batch(), m in 0.0f64..0.5, dm in 0.0f64..0.5) {
            prop_assume!(z.iter().all(|r| numerics::norm(r) > 1e-3));
            y[1] = y[0];
            let lo = snl_loss(&z, &y, &cfg(1.0, m, 1e-8)).unwrap().0;
            let hi = snl_loss(&z, &y, &cfg(1.0, m + dm, 1e-8)).unwrap().0;
            prop_assert!(hi >= lo - 1e-9);
        }

        #[test]
        fn snl_permutation_invariant((z, mut y) in batch(), seed in 0u64..1000) {
            prop_assume!(z.iter().all(|r| numerics::norm(r) > 1e-3));
            y[1] = y[0];
            let mut perm: Vec<usize> = (0..z.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let zp: Vec<_> = perm.iter().map(|&i| z[i].clone()).collect();
            let yp: Vec<_> = perm.iter().map(|&i| y[i]).collect();
            let c = LossConfig::default();
            let (l, g) = snl_loss(&z, &y, &c).unwrap();
            let (lp, gp) = snl_loss(&zp, &yp, &c).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);
            for (k, &i) in perm.iter().enumerate() {
                for t in 0..g[i].len() {
                    prop_assert!((g[i][t] - gp[k][t]).abs() < 1e-12);
                }
            }
        }
    }
}

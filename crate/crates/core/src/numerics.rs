//! Vector primitives, the margin-shifted cosine similarity matrix and a
//! central finite-difference gradient used to check analytic gradients.
//!
//! Everything here is `f64`: the pair-counting metrics and the log-sum-exp in
//! the contrastive loss are sensitive to rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default margin subtracted from cross-class cosine similarities.
pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty vector")]
    Empty,
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("batch of {got} vectors with {labels} labels (need equal counts, at least {min})")]
    BadBatch { got: usize, labels: usize, min: usize },
    #[error("invalid margin {0}")]
    InvalidMargin(f64),
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("finite-difference oracle produced a non-finite value at coordinate {coordinate}")]
    OracleFailure { coordinate: usize },
}

/// An embedding coordinate vector: non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = NumericsError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

pub fn check_finite(values: &[f64]) -> Result<(), NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::Empty);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { index }),
        None => Ok(()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Returns `a / ‖a‖`, rejecting zero vectors.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if a.is_empty() {
        return Err(NumericsError::Empty);
    }
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(NumericsError::ZeroNorm);
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Normalizes every row; fails on the first zero-norm row.
pub fn normalize_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Vec<Vec<f64>>, NumericsError> {
    rows.iter().map(|r| normalize(r.as_ref())).collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(NumericsError::Empty);
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `S_ij = cos(x_i, x_j) - margin * [y_i != y_j]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    margin: f64,
    entries: Vec<f64>,
    cosines: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// The unshifted cosine of the pair.
    #[inline]
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.cosines[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }
}

pub fn margin_similarity_matrix<R: AsRef<[f64]>>(
    xs: &[R],
    labels: &[usize],
    margin: f64,
) -> Result<SimilarityMatrix, NumericsError> {
    let n = xs.len();
    if n < 2 || labels.len() != n {
        return Err(NumericsError::BadBatch { got: n, labels: labels.len(), min: 2 });
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(NumericsError::InvalidMargin(margin));
    }
    let dim = xs[0].as_ref().len();
    for x in xs {
        if x.as_ref().len() != dim {
            return Err(NumericsError::DimensionMismatch { left: dim, right: x.as_ref().len() });
        }
        check_finite(x.as_ref())?;
    }
    let units = normalize_rows(xs)?;
    let mut cosines = vec![0.0; n * n];
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        cosines[i * n + i] = 1.0;
        entries[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c = dot(&units[i], &units[j]).clamp(-1.0, 1.0);
            let s = if labels[i] == labels[j] { c } else { c - margin };
            cosines[i * n + j] = c;
            cosines[j * n + i] = c;
            entries[i * n + j] = s;
            entries[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, margin, entries, cosines })
}

/// Central differences `(f(p + h e_k) - f(p - h e_k)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumericsError::InvalidStep(h));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(NumericsError::OracleFailure { coordinate: k });
        }
        grad.push(g);
    }
    Ok(grad)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Dense row-major matrix used for weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch { left: cols, right: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += yi * w;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_basic_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(NumericsError::DimensionMismatch { .. })
        ));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(NumericsError::ZeroNorm));
    }

    #[test]
    fn margin_applies_only_to_cross_class_pairs() {
        // cos = 0.8 between the two rows
        let a = vec![1.0, 0.0];
        let b = vec![0.8, 0.6];
        let same = margin_similarity_matrix(&[a.clone(), b.clone()], &[0, 0], 0.3).unwrap();
        assert!((same.get(0, 1) - 0.8).abs() < 1e-12);
        let c = vec![0.5, 0.75f64.sqrt()];
        let diff = margin_similarity_matrix(&[a, c], &[0, 1], DEFAULT_MARGIN).unwrap();
        assert!((diff.get(0, 1) - 0.2).abs() < 1e-12);
        assert_eq!(diff.get(0, 0), 1.0);
        assert_eq!(diff.get(1, 1), 1.0);
    }

    #[test]
    fn margin_matrix_rejects_bad_input() {
        assert!(margin_similarity_matrix(&[vec![1.0]], &[0], 0.3).is_err());
        assert_eq!(
            margin_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[0, 1], 0.3),
            Err(NumericsError::ZeroNorm)
        );
        assert!(margin_similarity_matrix(&[vec![1.0], vec![2.0]], &[0, 1], -0.1).is_err());
    }

    #[test]
    fn finite_difference_known_derivatives() {
        let g = finite_difference_gradient(|p| p[0] * p[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_reports_oracle_failure() {
        let r = finite_difference_gradient(|p| if p[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-3);
        assert_eq!(r, Err(NumericsError::OracleFailure { coordinate: 1 }));
        assert!(finite_difference_gradient(|p| p[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn feature_vector_validation() {
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![1.0, f64::INFINITY]).is_err());
        let v: FeatureVector = serde_json::from_str("[1.0,2.5]").unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.5]);
        assert!(serde_json::from_str::<FeatureVector>("[]").is_err());
    }

    fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..8, 1usize..6).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn margin_matrix_symmetric_and_bounded((xs, ys) in batch(), m in 0.0f64..1.0) {
            prop_assume!(xs.iter().all(|x| norm(x) > 1e-6));
            let s = margin_similarity_matrix(&xs, &ys, m).unwrap();
            for i in 0..xs.len() {
                prop_assert_eq!(s.get(i, i), 1.0);
                for j in 0..xs.len() {
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                    prop_assert!(s.get(i, j) >= -1.0 - m - 1e-12 && s.get(i, j) <= 1.0);
                }
            }
        }

        #[test]
        fn zero_margin_is_plain_cosine((xs, ys) in batch()) {
            prop_assume!(xs.iter().all(|x| norm(x) > 1e-6));
            let s = margin_similarity_matrix(&xs, &ys, 0.0).unwrap();
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if i != j {
                        let c = cosine_similarity(&xs[i], &xs[j]).unwrap();
                        prop_assert!((s.get(i, j) - c).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn larger_margin_shifts_negatives_by_delta((xs, ys) in batch(), m in 0.0f64..0.5, delta in 0.01f64..0.5) {
            prop_assume!(xs.iter().all(|x| norm(x) > 1e-6));
            let lo = margin_similarity_matrix(&xs, &ys, m).unwrap();
            let hi = margin_similarity_matrix(&xs, &ys, m + delta).unwrap();
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if ys[i] != ys[j] {
                        prop_assert!((lo.get(i, j) - hi.get(i, j) - delta).abs() < 1e-12);
                    } else {
                        prop_assert_eq!(lo.get(i, j), hi.get(i, j));
                    }
                }
            }
        }
    }
}

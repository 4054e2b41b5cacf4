//! Open-world classification and clustering metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkmeans::{self, AtomLabel, Dictionary, NnkConfig, NnkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Nnk(#[from] NnkError),
    #[error("cost matrix row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("label sequences differ in length: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Minimal-cost one-to-one assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `None` for rows left unmatched when there are more rows than columns.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

/// Hungarian algorithm with row and column potentials, `O(n² m)` for an
/// `n × m` matrix with `n <= m`; wider-than-tall inputs are transposed.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, EvalError> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment { row_to_col: Vec::new(), cost: 0.0 });
    }
    let m = cost[0].len();
    for (row, r) in cost.iter().enumerate() {
        if r.len() != m {
            return Err(EvalError::Ragged { row, expected: m, got: r.len() });
        }
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite { row, col });
        }
    }
    if m == 0 {
        return Ok(Assignment { row_to_col: vec![None; n], cost: 0.0 });
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = solve_rectangular(&t);
        let mut row_to_col = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            row_to_col[i] = Some(j);
        }
        return Ok(finish(cost, row_to_col));
    }
    let row_to_col = solve_rectangular(cost).into_iter().map(Some).collect();
    Ok(finish(cost, row_to_col))
}

fn finish(cost: &[Vec<f64>], row_to_col: Vec<Option<usize>>) -> Assignment {
    let total = row_to_col.iter().enumerate().filter_map(|(i, c)| c.map(|j| cost[i][j])).sum();
    Assignment { row_to_col, cost: total }
}

/// Requires `rows <= cols`; returns the column of every row.
fn solve_rectangular(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is a sentinel
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracySplit {
    /// `None` when no test sample belongs to a known class.
    pub acc_known: Option<f64>,
    /// `None` when no test sample belongs to an unknown class.
    pub acc_unknown: Option<f64>,
    /// Cluster id to class index under the optimal one-to-one map.
    pub mapping: BTreeMap<usize, usize>,
}

/// Maps clusters to classes one-to-one by maximizing matched samples over
/// the whole test set, then scores known and unknown classes separately.
pub fn accuracy_split(clusters: &[usize], truth: &[usize], known: &BTreeSet<usize>) -> Result<AccuracySplit, EvalError> {
    if clusters.len() != truth.len() {
        return Err(EvalError::Length { left: clusters.len(), right: truth.len() });
    }
    let cluster_ids: Vec<usize> = clusters.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let class_ids: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts = vec![vec![0.0; class_ids.len()]; cluster_ids.len()];
    for (c, t) in clusters.iter().zip(truth) {
        let r = cluster_ids.binary_search(c).expect("cluster id");
        let k = class_ids.binary_search(t).expect("class id");
        counts[r][k] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let assignment = hungarian(&cost)?;
    let mapping: BTreeMap<usize, usize> = assignment
        .row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, k)| k.map(|k| (cluster_ids[r], class_ids[k])))
        .collect();

    let (mut known_total, mut known_hit, mut unknown_total, mut unknown_hit) = (0usize, 0usize, 0usize, 0usize);
    for (c, t) in clusters.iter().zip(truth) {
        let hit = mapping.get(c) == Some(t);
        if known.contains(t) {
            known_total += 1;
            known_hit += usize::from(hit);
        } else {
            unknown_total += 1;
            unknown_hit += usize::from(hit);
        }
    }
    let ratio = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok(AccuracySplit {
        acc_known: ratio(known_hit, known_total),
        acc_unknown: ratio(unknown_hit, unknown_total),
        mapping,
    })
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn h_score(acc_known: f64, acc_unknown: f64) -> f64 {
    let s = acc_known + acc_unknown;
    if s > 0.0 {
        2.0 * acc_known * acc_unknown / s
    } else {
        0.0
    }
}

fn contingency(a: &[usize], b: &[usize]) -> Result<(BTreeMap<(usize, usize), usize>, BTreeMap<usize, usize>, BTreeMap<usize, usize>), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length { left: a.len(), right: b.len() });
    }
    let mut joint = BTreeMap::new();
    let mut ra = BTreeMap::new();
    let mut rb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ra.entry(x).or_insert(0) += 1;
        *rb.entry(y).or_insert(0) += 1;
    }
    Ok((joint, ra, rb))
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index. When the expected and maximal index coincide (both
/// partitions trivial in the same way) the result is 1.0.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    let (joint, ra, rb) = contingency(a, b)?;
    if a.len() < 2 {
        return Err(EvalError::Precondition("ARI needs at least 2 samples".into()));
    }
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.values().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.values().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(a.len());
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the entropies; 0 when
/// either labeling has zero entropy.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    let (joint, ra, rb) = contingency(a, b)?;
    if a.len() < 2 {
        return Err(EvalError::Precondition("NMI needs at least 2 samples".into()));
    }
    let n = a.len() as f64;
    let (ha, hb) = (entropy(&ra, n), entropy(&rb, n));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (n * c as f64 / (ra[&x] as f64 * rb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// Fit on training and test representations together.
    #[default]
    Transductive,
    /// Fit on test representations; training samples only label the atoms.
    TestOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorld {
    pub test_clusters: Vec<usize>,
    /// Deployment label of every test sample (atom labels, no test truth).
    pub test_labels: Vec<AtomLabel>,
    pub dictionary: Dictionary,
}

impl OpenWorld {
    /// Clusters whose atoms are all novel.
    pub fn novel_clusters(&self) -> Vec<usize> {
        let d = &self.dictionary;
        (0..d.n_clusters())
            .filter(|&c| {
                (0..d.len()).filter(|&a| d.cluster_of(a) == c).all(|a| d.atom_labels()[a] == AtomLabel::Novel)
            })
            .collect()
    }
}

/// Clusters test representations into `total_classes` groups with NNK-Means,
/// using the training labels to seed and name the known clusters.
pub fn open_world_classify<R: AsRef<[f64]>, S: AsRef<[f64]>>(
    train_x: &[R],
    train_y: &[usize],
    test_x: &[S],
    total_classes: usize,
    cfg: &NnkConfig,
    mode: ClusterMode,
) -> Result<OpenWorld, EvalError> {
    if train_x.len() != train_y.len() {
        return Err(EvalError::Length { left: train_x.len(), right: train_y.len() });
    }
    let n_known = train_y.iter().collect::<BTreeSet<_>>().len();
    if total_classes < n_known {
        return Err(EvalError::Precondition(format!(
            "total_classes {total_classes} is below the {n_known} known classes"
        )));
    }
    if total_classes * cfg.atoms_per_cluster > train_x.len() + test_x.len() {
        return Err(EvalError::Precondition(format!(
            "cannot form {total_classes} clusters from {} samples",
            train_x.len() + test_x.len()
        )));
    }
    let all: Vec<&[f64]> = train_x.iter().map(AsRef::as_ref).chain(test_x.iter().map(AsRef::as_ref)).collect();
    let partial: Vec<Option<usize>> =
        train_y.iter().map(|&y| Some(y)).chain(std::iter::repeat_n(None, test_x.len())).collect();
    let dictionary = match mode {
        ClusterMode::Transductive => nnkmeans::fit_partial(&all, &partial, total_classes, cfg)?,
        ClusterMode::TestOnly => {
            if test_x.len() < total_classes * cfg.atoms_per_cluster {
                return Err(EvalError::Precondition(format!(
                    "cannot form {total_classes} clusters from {} test samples",
                    test_x.len()
                )));
            }
            let mut d = nnkmeans::fit(test_x, None, total_classes, cfg)?;
            d.relabel(&all, &partial)?;
            d
        }
    };
    let mut test_clusters = Vec::with_capacity(test_x.len());
    let mut test_labels = Vec::with_capacity(test_x.len());
    for x in test_x {
        let code = dictionary.code(x.as_ref())?;
        test_clusters.push(dictionary.cluster_of(code.center()));
        test_labels.push(dictionary.label_of(&code));
    }
    Ok(OpenWorld { test_clusters, test_labels, dictionary })
}

/// Metrics document with fixed field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_known: Option<f64>,
    pub acc_unknown: Option<f64>,
    /// `None` when either accuracy is undefined.
    pub h_score: Option<f64>,
    pub ari: f64,
    pub nmi: f64,
    /// Cluster id to class name under the evaluation mapping.
    pub assignment: BTreeMap<usize, String>,
    pub novel_clusters: Vec<usize>,
}

impl EvalReport {
    /// `truth` holds class names; `known` names the classes seen in training.
    pub fn build(clusters: &[usize], truth: &[String], known: &[String], novel_clusters: Vec<usize>) -> Result<Self, EvalError> {
        let names: Vec<&String> = truth.iter().collect::<BTreeSet<_>>().into_iter().collect();
        let truth_ids: Vec<usize> = truth.iter().map(|t| names.binary_search(&t).expect("class name")).collect();
        let known_ids: BTreeSet<usize> =
            known.iter().filter_map(|k| names.binary_search(&k).ok()).collect();
        let split = accuracy_split(clusters, &truth_ids, &known_ids)?;
        let h = match (split.acc_known, split.acc_unknown) {
            (Some(a), Some(b)) => Some(h_score(a, b)),
            _ => None,
        };
        Ok(Self {
            acc_known: split.acc_known,
            acc_unknown: split.acc_unknown,
            h_score: h,
            ari: ari(clusters, &truth_ids)?,
            nmi: nmi(clusters, &truth_ids)?,
            assignment: split.mapping.into_iter().map(|(c, k)| (c, names[k].clone())).collect(),
            novel_clusters,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
        let rows = [
            ("Acc-K", fmt(self.acc_known)),
            ("Acc-U", fmt(self.acc_unknown)),
            ("H-Score", fmt(self.h_score)),
            ("ARI", format!("{:.4}", self.ari)),
            ("NMI", format!("{:.4}", self.nmi)),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<8} {value:>10}");
        }
        let novel: Vec<String> = self.novel_clusters.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{:<8} {:>10}", "novel", if novel.is_empty() { "-".to_string() } else { novel.join(",") });
        out
    }
}

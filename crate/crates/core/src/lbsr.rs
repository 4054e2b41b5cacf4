//! Label-based sample ranking.
//!
//! Training samples are clustered with NNK-Means (one cluster per known
//! class) and routed per class `e` into
//!
//! * soft positives: label `e`, predicted `e`
//! * hard positives: label `e`, predicted something else
//! * negatives: predicted `e` with another label, split by descending
//!   inconsistency into a soft half (first `len / 2`) and a hard half.
//!
//! Hard positives and both negative queues are ordered by descending
//! relevance and consumed front-first by [`RankedPools::draw_pair`].

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkmeans::{self, AtomLabel, NnkConfig, NnkError};
use crate::numerics::{self, dot, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LbsrError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nnk(#[from] NnkError),
    #[error("{what}: expected {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no positive counterpart other than sample {anchor} for class {class}")]
    NoPositive { anchor: usize, class: usize },
    #[error("no sample outside class {0} to use as a negative")]
    NoNegative(usize),
    #[error("sample {0} is not in the pools")]
    UnknownSample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbsrConfig {
    /// Neighbors considered for inconsistency; clamped to `n - 1`.
    pub top_k: usize,
    /// Degrees of freedom of the Student-t soft assignment.
    pub student_t_dof: f64,
    pub nnk: NnkConfig,
}

impl Default for LbsrConfig {
    fn default() -> Self {
        Self { top_k: 10, student_t_dof: 1.0, nnk: NnkConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub relevance: f64,
    pub inconsistency: f64,
    pub entropy: f64,
}

/// Scores every sample.
///
/// * inconsistency: share of the `top_k` cosine-nearest other samples whose
///   prediction differs (ties broken by lower index)
/// * entropy: Shannon entropy of `q_c ∝ (1 + ‖x - μ_c‖²/ν)^{-(ν+1)/2}`
///   over `centers`; zero when fewer than two distinct centers exist
/// * relevance: mean of the min-max normalized inconsistency and entropy
pub fn score<R: AsRef<[f64]>, C: AsRef<[f64]>>(
    xs: &[R],
    preds: &[Option<usize>],
    centers: &[C],
    top_k: usize,
    dof: f64,
) -> Result<Vec<SampleScore>, LbsrError> {
    let n = xs.len();
    if preds.len() != n {
        return Err(LbsrError::Length { what: "predictions", expected: n, got: preds.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let units = numerics::normalize_rows(xs)?;
    let k = top_k.min(n - 1);

    let mut inconsistency = vec![0.0; n];
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        if k == 0 {
            break;
        }
        sims.clear();
        sims.extend((0..n).filter(|&j| j != i).map(|j| (j, dot(&units[i], &units[j]))));
        let by_similarity =
            |a: &(usize, f64), b: &(usize, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, by_similarity);
        }
        let disagree = sims[..k].iter().filter(|(j, _)| preds[*j] != preds[i]).count();
        inconsistency[i] = disagree as f64 / k as f64;
    }

    let distinct_centers = {
        let mut d: Vec<&[f64]> = Vec::new();
        for c in centers {
            if !d.iter().any(|x| *x == c.as_ref()) {
                d.push(c.as_ref());
            }
        }
        d.len()
    };
    let entropy: Vec<f64> = if distinct_centers < 2 {
        vec![0.0; n]
    } else {
        xs.iter().map(|x| student_t_entropy(x.as_ref(), centers, dof)).collect()
    };

    let ni = min_max(&inconsistency);
    let ne = min_max(&entropy);
    Ok((0..n)
        .map(|i| SampleScore {
            index: i,
            relevance: 0.5 * (ni[i] + ne[i]),
            inconsistency: inconsistency[i],
            entropy: entropy[i],
        })
        .collect())
}

fn student_t_entropy<C: AsRef<[f64]>>(x: &[f64], centers: &[C], dof: f64) -> f64 {
    let power = -(dof + 1.0) / 2.0;
    // log-space to stay finite for far centers
    let logs: Vec<f64> = centers
        .iter()
        .map(|c| power * (numerics::squared_distance(x, c.as_ref()) / dof).ln_1p())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    logs.iter()
        .map(|l| {
            let q = (l - max).exp() / z;
            if q > 0.0 {
                -q * q.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Zero range maps everything to 0.
fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassPools {
    pub soft_pos: Vec<usize>,
    pub hard_pos: VecDeque<usize>,
    pub soft_neg: VecDeque<usize>,
    pub hard_neg: VecDeque<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub soft_pos: usize,
    pub hard_pos: usize,
    pub soft_neg: usize,
    pub hard_neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPools {
    labels: Vec<usize>,
    preds: Vec<Option<usize>>,
    scores: Vec<SampleScore>,
    classes: Vec<ClassPools>,
    initial: Vec<PoolSizes>,
}

fn sort_by_relevance(items: &mut [usize], scores: &[SampleScore]) {
    items.sort_by(|&a, &b| {
        scores[b].relevance.partial_cmp(&scores[a].relevance).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
}

impl RankedPools {
    /// Routes samples into pools given ground truth, predictions and scores.
    pub fn build(
        labels: &[usize],
        preds: &[Option<usize>],
        scores: Vec<SampleScore>,
        n_classes: usize,
    ) -> Result<Self, LbsrError> {
        let n = labels.len();
        if preds.len() != n {
            return Err(LbsrError::Length { what: "predictions", expected: n, got: preds.len() });
        }
        if scores.len() != n {
            return Err(LbsrError::Length { what: "scores", expected: n, got: scores.len() });
        }
        let mut soft_pos = vec![Vec::new(); n_classes];
        let mut hard_pos = vec![Vec::new(); n_classes];
        let mut negs = vec![Vec::new(); n_classes];
        for i in 0..n {
            let y = labels[i];
            if y >= n_classes {
                return Err(LbsrError::LabelOutOfRange { label: y, classes: n_classes });
            }
            if preds[i] == Some(y) {
                soft_pos[y].push(i);
            } else {
                hard_pos[y].push(i);
                if let Some(p) = preds[i] {
                    if p < n_classes {
                        negs[p].push(i);
                    }
                }
            }
        }
        let mut classes = Vec::with_capacity(n_classes);
        for e in 0..n_classes {
            let mut sp = std::mem::take(&mut soft_pos[e]);
            let mut hp = std::mem::take(&mut hard_pos[e]);
            let mut ng = std::mem::take(&mut negs[e]);
            sort_by_relevance(&mut sp, &scores);
            sort_by_relevance(&mut hp, &scores);
            ng.sort_by(|&a, &b| {
                scores[b]
                    .inconsistency
                    .partial_cmp(&scores[a].inconsistency)
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut hard_half = ng.split_off(ng.len() / 2);
            let mut soft_half = ng;
            sort_by_relevance(&mut soft_half, &scores);
            sort_by_relevance(&mut hard_half, &scores);
            classes.push(ClassPools {
                soft_pos: sp,
                hard_pos: hp.into(),
                soft_neg: soft_half.into(),
                hard_neg: hard_half.into(),
            });
        }
        let mut pools = Self { labels: labels.to_vec(), preds: preds.to_vec(), scores, classes, initial: Vec::new() };
        pools.initial = (0..n_classes).map(|e| pools.sizes(e)).collect();
        Ok(pools)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, e: usize) -> &ClassPools {
        &self.classes[e]
    }

    pub fn scores(&self) -> &[SampleScore] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn predictions(&self) -> &[Option<usize>] {
        &self.preds
    }

    pub fn sizes(&self, e: usize) -> PoolSizes {
        let c = &self.classes[e];
        PoolSizes {
            soft_pos: c.soft_pos.len(),
            hard_pos: c.hard_pos.len(),
            soft_neg: c.soft_neg.len(),
            hard_neg: c.hard_neg.len(),
        }
    }

    pub fn initial_sizes(&self, e: usize) -> PoolSizes {
        self.initial[e]
    }

    /// Summed current queue sizes over all classes.
    pub fn total_sizes(&self) -> PoolSizes {
        (0..self.n_classes()).map(|e| self.sizes(e)).fold(PoolSizes::default(), |a, s| PoolSizes {
            soft_pos: a.soft_pos + s.soft_pos,
            hard_pos: a.hard_pos + s.hard_pos,
            soft_neg: a.soft_neg + s.soft_neg,
            hard_neg: a.hard_neg + s.hard_neg,
        })
    }

    /// Draws `(x_plus, x_minus)` for `anchor`; dequeues mutate the pools.
    ///
    /// Random draws happen in a fixed order: one fair coin for the negative
    /// (`true` = hard queue first), an index draw if both negative queues are
    /// empty, one fair coin for the positive (`true` = hard-positive queue),
    /// and an index draw whenever a soft positive is sampled.
    pub fn draw_pair<G: Rng + ?Sized>(&mut self, anchor: usize, rng: &mut G) -> Result<(usize, usize), LbsrError> {
        let e = *self.labels.get(anchor).ok_or(LbsrError::UnknownSample(anchor))?;

        let hard_first = rng.random_bool(0.5);
        let pools = &mut self.classes[e];
        let dequeued =
            if hard_first { pools.hard_neg.pop_front().or_else(|| pools.soft_neg.pop_front()) } else { pools.soft_neg.pop_front().or_else(|| pools.hard_neg.pop_front()) };
        let minus = match dequeued {
            Some(i) => i,
            None => {
                let others: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] != e).collect();
                if others.is_empty() {
                    return Err(LbsrError::NoNegative(e));
                }
                others[rng.random_range(0..others.len())]
            }
        };

        let from_hard = rng.random_bool(0.5);
        let pools = &mut self.classes[e];
        let soft: Vec<usize> = pools.soft_pos.iter().copied().filter(|&i| i != anchor).collect();
        let dequeue_hard = |q: &mut VecDeque<usize>| q.iter().position(|&i| i != anchor).and_then(|p| q.remove(p));
        let plus = if from_hard {
            match dequeue_hard(&mut pools.hard_pos) {
                Some(i) => Some(i),
                None if !soft.is_empty() => Some(soft[rng.random_range(0..soft.len())]),
                None => None,
            }
        } else if !soft.is_empty() {
            Some(soft[rng.random_range(0..soft.len())])
        } else {
            dequeue_hard(&mut pools.hard_pos)
        };
        let plus = plus.ok_or(LbsrError::NoPositive { anchor, class: e })?;
        Ok((plus, minus))
    }

    /// Tab-separated diagnostic table, one row per pool membership.
    pub fn to_tsv(&self, ids: &[String], class_names: &[String]) -> String {
        let mut out = String::from("sample_id\tclass\tpool\trelevance\tinconsistency\n");
        for (e, pools) in self.classes.iter().enumerate() {
            let name = class_names.get(e).map_or_else(|| e.to_string(), Clone::clone);
            let groups: [(&str, Vec<usize>); 4] = [
                ("soft_pos", pools.soft_pos.clone()),
                ("hard_pos", pools.hard_pos.iter().copied().collect()),
                ("soft_neg", pools.soft_neg.iter().copied().collect()),
                ("hard_neg", pools.hard_neg.iter().copied().collect()),
            ];
            for (pool, members) in groups {
                for i in members {
                    let id = ids.get(i).map_or_else(|| i.to_string(), Clone::clone);
                    let s = &self.scores[i];
                    let _ = writeln!(out, "{id}\t{name}\t{pool}\t{}\t{}", s.relevance, s.inconsistency);
                }
            }
        }
        out
    }
}

/// Fits NNK-Means with one cluster per class, scores and routes every sample.
pub fn rank<R: AsRef<[f64]>>(
    xs: &[R],
    labels: &[usize],
    n_classes: usize,
    cfg: &LbsrConfig,
) -> Result<RankedPools, LbsrError> {
    if labels.len() != xs.len() {
        return Err(LbsrError::Length { what: "labels", expected: xs.len(), got: labels.len() });
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(LbsrError::LabelOutOfRange { label: y, classes: n_classes });
        }
        counts[y] += 1;
    }
    if let Some(e) = counts.iter().position(|&c| c == 0) {
        return Err(LbsrError::EmptyClass(e));
    }
    let units = numerics::normalize_rows(xs)?;
    let dict = nnkmeans::fit(&units, Some(labels), n_classes, &cfg.nnk)?;
    let prediction = dict.predict(&units)?;
    let preds: Vec<Option<usize>> = prediction.labels.iter().map(|l: &AtomLabel| l.class()).collect();
    let scores = score(&units, &preds, dict.atoms(), cfg.top_k, cfg.student_t_dof)?;
    RankedPools::build(labels, &preds, scores, n_classes)
}

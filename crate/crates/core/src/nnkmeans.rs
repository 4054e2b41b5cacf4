//! NNK-Means soft clustering.
//!
//! Every sample is coded as a non-negative combination of its `kernel_k`
//! most similar atoms (cosine kernel on unit vectors). The coefficients solve
//!
//! ```text
//! min_{θ ≥ 0} ‖κ(x, S) - K_SS θ‖²
//! ```
//!
//! by projected gradient descent and are then normalized to sum to one.
//! Fitting alternates coding with a weighted-mean atom update. An iteration
//! is only accepted when the reconstruction error does not increase, so the
//! recorded history is monotone.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, dot, NumericsError};

const FORMAT_HEADER: &str = "nnk-dictionary v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnkError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("cannot fit {clusters} clusters on {samples} samples")]
    TooFewSamples { clusters: usize, samples: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{expected} labels expected, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("dictionary has no labeled atoms")]
    Unlabeled,
    #[error("dictionary dimension is {expected}, sample has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnkConfig {
    /// Neighborhood size used when coding a sample.
    pub kernel_k: usize,
    pub max_iters: usize,
    /// Relative improvement of the reconstruction error below which fitting stops.
    pub tol: f64,
    pub nnls_max_iters: usize,
    pub nnls_tol: f64,
    pub atoms_per_cluster: usize,
    pub seed: u64,
}

impl Default for NnkConfig {
    fn default() -> Self {
        Self {
            kernel_k: 10,
            max_iters: 50,
            tol: 1e-6,
            nnls_max_iters: 100,
            nnls_tol: 1e-8,
            atoms_per_cluster: 1,
            seed: 0,
        }
    }
}

impl NnkConfig {
    fn validate(&self) -> Result<(), NnkError> {
        if self.kernel_k == 0 {
            return Err(NnkError::InvalidConfig("kernel_k must be positive".into()));
        }
        if self.atoms_per_cluster == 0 {
            return Err(NnkError::InvalidConfig("atoms_per_cluster must be positive".into()));
        }
        if !(self.tol >= 0.0) || !(self.nnls_tol >= 0.0) {
            return Err(NnkError::InvalidConfig("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AtomLabel {
    Class(usize),
    Novel,
}

impl AtomLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            AtomLabel::Class(c) => Some(c),
            AtomLabel::Novel => None,
        }
    }
}

/// Non-negative weights over a subset of atoms; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SoftAssignment {
    /// Atom with the largest weight (lowest index on ties).
    pub fn center(&self) -> usize {
        let mut best = 0;
        for k in 1..self.support.len() {
            let better = self.weights[k] > self.weights[best]
                || (self.weights[k] == self.weights[best] && self.support[k] < self.support[best]);
            if better {
                best = k;
            }
        }
        self.support[best]
    }

    pub fn weight_of(&self, atom: usize) -> f64 {
        self.support.iter().position(|&a| a == atom).map_or(0.0, |k| self.weights[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Vec<Vec<f64>>,
    atom_labels: Vec<AtomLabel>,
    gram: Vec<f64>,
    kernel_k: usize,
    atoms_per_cluster: usize,
    nnls_max_iters: usize,
    nnls_tol: f64,
    fit_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<AtomLabel>,
    pub center_ids: Vec<usize>,
}

impl Dictionary {
    /// Builds a dictionary from explicit atoms (rows are normalized).
    pub fn from_atoms(
        atoms: &[Vec<f64>],
        atom_labels: Vec<AtomLabel>,
        cfg: &NnkConfig,
    ) -> Result<Self, NnkError> {
        cfg.validate()?;
        if atoms.is_empty() {
            return Err(NnkError::TooFewSamples { clusters: 1, samples: 0 });
        }
        if atom_labels.len() != atoms.len() {
            return Err(NnkError::LabelCount { expected: atoms.len(), got: atom_labels.len() });
        }
        if atoms.len() % cfg.atoms_per_cluster != 0 {
            return Err(NnkError::InvalidConfig("atom count must be a multiple of atoms_per_cluster".into()));
        }
        let dim = atoms[0].len();
        for a in atoms {
            if a.len() != dim {
                return Err(NnkError::Dimension { expected: dim, got: a.len() });
            }
            numerics::check_finite(a)?;
        }
        let atoms = numerics::normalize_rows(atoms)?;
        Ok(Self::assemble(atoms, atom_labels, cfg, Vec::new()))
    }

    fn assemble(atoms: Vec<Vec<f64>>, atom_labels: Vec<AtomLabel>, cfg: &NnkConfig, history: Vec<f64>) -> Self {
        let gram = gram_matrix(&atoms);
        Self {
            atoms,
            atom_labels,
            gram,
            kernel_k: cfg.kernel_k,
            atoms_per_cluster: cfg.atoms_per_cluster,
            nnls_max_iters: cfg.nnls_max_iters,
            nnls_tol: cfg.nnls_tol,
            fit_history: history,
        }
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom_labels(&self) -> &[AtomLabel] {
        &self.atom_labels
    }

    pub fn kernel_k(&self) -> usize {
        self.kernel_k
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.atoms.len() / self.atoms_per_cluster
    }

    pub fn cluster_of(&self, atom: usize) -> usize {
        atom / self.atoms_per_cluster
    }

    /// Reconstruction error after the seeding step and after every accepted iteration.
    pub fn fit_history(&self) -> &[f64] {
        &self.fit_history
    }

    pub fn is_labeled(&self) -> bool {
        self.atom_labels.iter().any(|l| *l != AtomLabel::Novel)
    }

    pub fn set_atom_labels(&mut self, labels: Vec<AtomLabel>) -> Result<(), NnkError> {
        if labels.len() != self.atoms.len() {
            return Err(NnkError::LabelCount { expected: self.atoms.len(), got: labels.len() });
        }
        self.atom_labels = labels;
        Ok(())
    }

    /// Codes a sample against the dictionary.
    pub fn code(&self, x: &[f64]) -> Result<SoftAssignment, NnkError> {
        if x.len() != self.dim() {
            return Err(NnkError::Dimension { expected: self.dim(), got: x.len() });
        }
        numerics::check_finite(x)?;
        let unit = numerics::normalize(x)?;
        Ok(self.code_unit(&unit))
    }

    fn code_unit(&self, unit: &[f64]) -> SoftAssignment {
        let a = self.atoms.len();
        let kernel: Vec<f64> = self.atoms.iter().map(|atom| dot(atom, unit)).collect();
        let mut order: Vec<usize> = (0..a).collect();
        order.sort_by(|&i, &j| kernel[j].partial_cmp(&kernel[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
        order.truncate(self.kernel_k.min(a));
        let s = order.len();
        let mut k_ss = vec![0.0; s * s];
        for (r, &i) in order.iter().enumerate() {
            for (c, &j) in order.iter().enumerate() {
                k_ss[r * s + c] = self.gram[i * a + j];
            }
        }
        let b: Vec<f64> = order.iter().map(|&i| kernel[i]).collect();
        let mut init = vec![0.0; s];
        init[0] = b[0].max(0.0);
        let theta = nnls_projected_gradient(&k_ss, &b, init, self.nnls_max_iters, self.nnls_tol);
        let total: f64 = theta.iter().sum();
        if !(total > 0.0) {
            return SoftAssignment { support: vec![order[0]], weights: vec![1.0] };
        }
        let mut support = Vec::with_capacity(s);
        let mut weights = Vec::with_capacity(s);
        for (k, &t) in theta.iter().enumerate() {
            if t > 0.0 {
                support.push(order[k]);
                weights.push(t / total);
            }
        }
        SoftAssignment { support, weights }
    }

    fn code_all(&self, units: &[Vec<f64>]) -> Vec<SoftAssignment> {
        units.iter().map(|u| self.code_unit(u)).collect()
    }

    /// Per-sample label (largest summed weight per label) and center atom.
    pub fn predict<R: AsRef<[f64]>>(&self, xs: &[R]) -> Result<Prediction, NnkError> {
        if !self.is_labeled() {
            return Err(NnkError::Unlabeled);
        }
        let mut labels = Vec::with_capacity(xs.len());
        let mut center_ids = Vec::with_capacity(xs.len());
        for x in xs {
            let code = self.code(x.as_ref())?;
            labels.push(self.label_of(&code));
            center_ids.push(code.center());
        }
        Ok(Prediction { labels, center_ids })
    }

    /// Label with the largest summed weight over the support of `code`.
    pub fn label_of(&self, code: &SoftAssignment) -> AtomLabel {
        let mut totals: Vec<(AtomLabel, f64)> = Vec::new();
        for (&atom, &w) in code.support.iter().zip(&code.weights) {
            let label = self.atom_labels[atom];
            match totals.iter_mut().find(|(l, _)| *l == label) {
                Some((_, t)) => *t += w,
                None => totals.push((label, w)),
            }
        }
        totals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        totals[0].0
    }

    /// Relabels atoms from (partially) labeled samples coded against the
    /// current atoms. An atom takes the weight-majority label of the labeled
    /// samples it is the center of, or [`AtomLabel::Novel`] when labeled
    /// members carry less than half of its member weight.
    pub fn relabel<R: AsRef<[f64]>>(&mut self, xs: &[R], labels: &[Option<usize>]) -> Result<(), NnkError> {
        if xs.len() != labels.len() {
            return Err(NnkError::LabelCount { expected: xs.len(), got: labels.len() });
        }
        let units = self.check_and_normalize(xs)?;
        let codes = self.code_all(&units);
        self.atom_labels = label_atoms(self.atoms.len(), &codes, labels);
        Ok(())
    }

    fn check_and_normalize<R: AsRef<[f64]>>(&self, xs: &[R]) -> Result<Vec<Vec<f64>>, NnkError> {
        for x in xs {
            if x.as_ref().len() != self.dim() {
                return Err(NnkError::Dimension { expected: self.dim(), got: x.as_ref().len() });
            }
            numerics::check_finite(x.as_ref())?;
        }
        Ok(numerics::normalize_rows(xs)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(
            out,
            "atoms {} dim {} kernel_k {} atoms_per_cluster {} nnls_iters {} nnls_tol {}",
            self.atoms.len(),
            self.dim(),
            self.kernel_k,
            self.atoms_per_cluster,
            self.nnls_max_iters,
            self.nnls_tol
        );
        for (atom, label) in self.atoms.iter().zip(&self.atom_labels) {
            match label {
                AtomLabel::Class(c) => {
                    let _ = write!(out, "{c}");
                }
                AtomLabel::Novel => out.push_str("novel"),
            }
            for v in atom {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NnkError> {
        let parse_err = |line: usize, message: String| NnkError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == FORMAT_HEADER => {}
            _ => return Err(parse_err(1, format!("expected header `{FORMAT_HEADER}`"))),
        }
        let (_, dims) = lines.next().ok_or_else(|| parse_err(2, "missing dimension line".into()))?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let field = |name: &str| -> Result<&str, NnkError> {
            fields
                .iter()
                .position(|f| *f == name)
                .and_then(|p| fields.get(p + 1).copied())
                .ok_or_else(|| parse_err(2, format!("missing `{name}`")))
        };
        let num = |name: &str| -> Result<usize, NnkError> {
            field(name)?.parse().map_err(|e| parse_err(2, format!("bad `{name}`: {e}")))
        };
        let n_atoms = num("atoms")?;
        let dim = num("dim")?;
        let cfg = NnkConfig {
            kernel_k: num("kernel_k")?,
            atoms_per_cluster: num("atoms_per_cluster")?,
            nnls_max_iters: num("nnls_iters")?,
            nnls_tol: field("nnls_tol")?.parse().map_err(|e| parse_err(2, format!("bad `nnls_tol`: {e}")))?,
            ..NnkConfig::default()
        };
        let mut atoms = Vec::with_capacity(n_atoms);
        let mut labels = Vec::with_capacity(n_atoms);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let label = match parts.next() {
                Some("novel") => AtomLabel::Novel,
                Some(t) => AtomLabel::Class(t.parse().map_err(|e| parse_err(idx + 1, format!("bad label: {e}")))?),
                None => unreachable!("blank lines are skipped"),
            };
            let coords = parts
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(idx + 1, format!("bad coordinate: {e}")))?;
            if coords.len() != dim {
                return Err(parse_err(idx + 1, format!("expected {dim} coordinates, got {}", coords.len())));
            }
            atoms.push(coords);
            labels.push(label);
        }
        if atoms.len() != n_atoms {
            return Err(parse_err(2, format!("header declares {n_atoms} atoms, found {}", atoms.len())));
        }
        Self::from_atoms(&atoms, labels, &cfg)
    }
}

fn gram_matrix(atoms: &[Vec<f64>]) -> Vec<f64> {
    let a = atoms.len();
    let mut g = vec![0.0; a * a];
    for i in 0..a {
        for j in i..a {
            let v = dot(&atoms[i], &atoms[j]);
            g[i * a + j] = v;
            g[j * a + i] = v;
        }
    }
    g
}

/// Projected gradient for `min_{θ≥0} ‖b - Kθ‖²` with a symmetric `K`
/// (row-major, `s × s`). Step size is `1 / L` with `L = 2 σ_max(K)²`.
pub fn nnls_projected_gradient(k: &[f64], b: &[f64], init: Vec<f64>, max_iters: usize, tol: f64) -> Vec<f64> {
    let s = b.len();
    let sigma = spectral_norm_symmetric(k, s);
    if sigma == 0.0 {
        return vec![0.0; s];
    }
    let step = 1.0 / (2.0 * sigma * sigma);
    let mut theta = init;
    let mut residual = vec![0.0; s];
    for _ in 0..max_iters {
        for r in 0..s {
            residual[r] = dot(&k[r * s..(r + 1) * s], &theta) - b[r];
        }
        let mut max_change: f64 = 0.0;
        for c in 0..s {
            // gradient 2 Kᵀ(Kθ - b), K symmetric
            let g: f64 = 2.0 * (0..s).map(|r| k[r * s + c] * residual[r]).sum::<f64>();
            let next = (theta[c] - step * g).max(0.0);
            max_change = max_change.max((next - theta[c]).abs());
            theta[c] = next;
        }
        if max_change < tol {
            break;
        }
    }
    theta
}

fn spectral_norm_symmetric(k: &[f64], s: usize) -> f64 {
    // power iteration; the result is inflated slightly so the step stays safe
    let mut v = vec![1.0 / (s as f64).sqrt(); s];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w: Vec<f64> = (0..s).map(|r| dot(&k[r * s..(r + 1) * s], &v)).collect();
        let n = numerics::norm(&w);
        if n == 0.0 {
            break;
        }
        let converged = (n - lambda).abs() <= 1e-12 * n;
        lambda = n;
        v = w.into_iter().map(|x| x / n).collect();
        if converged {
            break;
        }
    }
    let frob = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    (lambda * 1.01).min(frob).max(lambda)
}

fn reconstruction_error(units: &[Vec<f64>], atoms: &[Vec<f64>], codes: &[SoftAssignment]) -> Vec<f64> {
    units
        .iter()
        .zip(codes)
        .map(|(x, code)| {
            let mut recon = vec![0.0; x.len()];
            for (&a, &w) in code.support.iter().zip(&code.weights) {
                for (r, v) in recon.iter_mut().zip(&atoms[a]) {
                    *r += w * v;
                }
            }
            numerics::squared_distance(x, &recon)
        })
        .collect()
}

fn label_atoms(n_atoms: usize, codes: &[SoftAssignment], labels: &[Option<usize>]) -> Vec<AtomLabel> {
    // member weight per atom: (labeled votes by class, labeled total, overall total)
    let tally = |members_only: bool| {
        let mut votes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_atoms];
        let mut labeled = vec![0.0; n_atoms];
        let mut total = vec![0.0; n_atoms];
        for (code, label) in codes.iter().zip(labels) {
            let center = code.center();
            for (&a, &w) in code.support.iter().zip(&code.weights) {
                if members_only && a != center {
                    continue;
                }
                total[a] += w;
                if let Some(c) = *label {
                    labeled[a] += w;
                    match votes[a].iter_mut().find(|(cls, _)| *cls == c) {
                        Some((_, v)) => *v += w,
                        None => votes[a].push((c, w)),
                    }
                }
            }
        }
        (votes, labeled, total)
    };
    let (votes, labeled, total) = tally(true);
    let (soft_votes, soft_labeled, soft_total) = tally(false);
    (0..n_atoms)
        .map(|a| {
            let (v, l, t) = if total[a] > 0.0 {
                (&votes[a], labeled[a], total[a])
            } else {
                (&soft_votes[a], soft_labeled[a], soft_total[a])
            };
            if t == 0.0 || l == 0.0 || l < 0.5 * t {
                return AtomLabel::Novel;
            }
            let mut best = v[0];
            for &(c, w) in &v[1..] {
                if w > best.1 || (w == best.1 && c < best.0) {
                    best = (c, w);
                }
            }
            AtomLabel::Class(best.0)
        })
        .collect()
}

/// Fits with fully labeled or unlabeled samples.
pub fn fit<R: AsRef<[f64]>>(
    xs: &[R],
    labels: Option<&[usize]>,
    n_clusters: usize,
    cfg: &NnkConfig,
) -> Result<Dictionary, NnkError> {
    let partial: Vec<Option<usize>> = match labels {
        Some(l) => {
            if l.len() != xs.len() {
                return Err(NnkError::LabelCount { expected: xs.len(), got: l.len() });
            }
            l.iter().map(|&c| Some(c)).collect()
        }
        None => vec![None; xs.len()],
    };
    fit_partial(xs, &partial, n_clusters, cfg)
}

/// Fits with labels for a subset of samples (`None` = unlabeled).
///
/// Seeding places one cluster per distinct label at the normalized class
/// mean (when there are no more labels than clusters) and fills the
/// remaining clusters with greedy k-means++ draws.
pub fn fit_partial<R: AsRef<[f64]>>(
    xs: &[R],
    labels: &[Option<usize>],
    n_clusters: usize,
    cfg: &NnkConfig,
) -> Result<Dictionary, NnkError> {
    cfg.validate()?;
    if labels.len() != xs.len() {
        return Err(NnkError::LabelCount { expected: xs.len(), got: labels.len() });
    }
    let n_atoms = n_clusters * cfg.atoms_per_cluster;
    if n_clusters == 0 || xs.len() < n_atoms {
        return Err(NnkError::TooFewSamples { clusters: n_clusters, samples: xs.len() });
    }
    let dim = xs[0].as_ref().len();
    for x in xs {
        if x.as_ref().len() != dim {
            return Err(NnkError::Dimension { expected: dim, got: x.as_ref().len() });
        }
        numerics::check_finite(x.as_ref())?;
    }
    let units = numerics::normalize_rows(xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let atoms = seed_atoms(&units, labels, n_clusters, cfg.atoms_per_cluster, &mut rng);

    let mut dict = Dictionary::assemble(atoms, vec![AtomLabel::Novel; n_atoms], cfg, Vec::new());
    let mut codes = dict.code_all(&units);
    let mut per_sample = reconstruction_error(&units, &dict.atoms, &codes);
    let mut err: f64 = per_sample.iter().sum();
    let mut history = vec![err];

    for _ in 0..cfg.max_iters {
        let atoms = update_atoms(&units, &codes, &per_sample, n_atoms);
        let candidate = Dictionary::assemble(atoms, vec![AtomLabel::Novel; n_atoms], cfg, Vec::new());
        let new_codes = candidate.code_all(&units);
        let new_per_sample = reconstruction_error(&units, &candidate.atoms, &new_codes);
        let new_err: f64 = new_per_sample.iter().sum();
        if new_err > err {
            break;
        }
        let improvement = err - new_err;
        dict = candidate;
        codes = new_codes;
        per_sample = new_per_sample;
        err = new_err;
        history.push(err);
        if improvement <= cfg.tol * err.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    dict.atom_labels = label_atoms(n_atoms, &codes, labels);
    dict.fit_history = history;
    Ok(dict)
}

fn update_atoms(units: &[Vec<f64>], codes: &[SoftAssignment], per_sample: &[f64], n_atoms: usize) -> Vec<Vec<f64>> {
    let dim = units[0].len();
    let mut sums = vec![vec![0.0; dim]; n_atoms];
    let mut mass = vec![0.0; n_atoms];
    for (x, code) in units.iter().zip(codes) {
        for (&a, &w) in code.support.iter().zip(&code.weights) {
            mass[a] += w;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += w * v;
            }
        }
    }
    // worst-reconstructed samples first, for reseeding empty atoms
    let mut worst: Vec<usize> = (0..units.len()).collect();
    worst.sort_by(|&i, &j| per_sample[j].partial_cmp(&per_sample[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    let mut next_worst = worst.into_iter();
    sums.into_iter()
        .zip(mass)
        .map(|(s, m)| {
            let normalized = if m > 0.0 { numerics::normalize(&s).ok() } else { None };
            normalized.unwrap_or_else(|| {
                let i = next_worst.next().unwrap_or(0);
                units[i].clone()
            })
        })
        .collect()
}

fn seed_atoms(
    units: &[Vec<f64>],
    labels: &[Option<usize>],
    n_clusters: usize,
    per_cluster: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut classes: Vec<usize> = labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(n_clusters * per_cluster);
    let mut min_d2 = vec![f64::INFINITY; units.len()];
    let push = |atom: Vec<f64>, atoms: &mut Vec<Vec<f64>>, min_d2: &mut Vec<f64>| {
        for (d, x) in min_d2.iter_mut().zip(units) {
            *d = d.min(numerics::squared_distance(x, &atom));
        }
        atoms.push(atom);
    };

    if !classes.is_empty() && classes.len() <= n_clusters {
        for &c in &classes {
            let members: Vec<usize> = (0..units.len()).filter(|&i| labels[i] == Some(c)).collect();
            let dim = units[0].len();
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(&units[i]) {
                    *m += v;
                }
            }
            let first = numerics::normalize(&mean).unwrap_or_else(|_| units[members[0]].clone());
            push(first, &mut atoms, &mut min_d2);
            for _ in 1..per_cluster {
                let i = kmeanspp_pick(units, &members, &min_d2, rng);
                push(units[i].clone(), &mut atoms, &mut min_d2);
            }
        }
    }
    let everyone: Vec<usize> = (0..units.len()).collect();
    while atoms.len() < n_clusters * per_cluster {
        let i = if atoms.is_empty() {
            rng.random_range(0..units.len())
        } else {
            kmeanspp_pick(units, &everyone, &min_d2, rng)
        };
        push(units[i].clone(), &mut atoms, &mut min_d2);
    }
    atoms
}

/// Greedy k-means++: draws `2 + ln k` candidates with probability ∝ D² and
/// keeps the one that lowers the total potential most.
fn kmeanspp_pick(units: &[Vec<f64>], pool: &[usize], min_d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = pool.iter().map(|&i| min_d2[i]).sum();
    if !(total > 0.0) || !total.is_finite() {
        return pool[rng.random_range(0..pool.len())];
    }
    let trials = 2 + (pool.len() as f64).ln().floor() as usize;
    let mut best = (pool[0], f64::INFINITY);
    for _ in 0..trials {
        let mut target = rng.random::<f64>() * total;
        let mut pick = pool[pool.len() - 1];
        for &i in pool {
            target -= min_d2[i];
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        let potential: f64 = pool
            .iter()
            .map(|&i| min_d2[i].min(numerics::squared_distance(&units[i], &units[pick])))
            .sum();
        if potential < best.1 {
            best = (pick, potential);
        }
    }
    best.0
}

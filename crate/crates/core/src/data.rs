//! Records, JSON-lines IO, openness splits and a Gaussian-mixture generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, FeatureVector};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("synthetic generator: {0}")]
    Synth(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One sample. Unknown JSON fields are kept in `extra` and written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub label: String,
    pub context_features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_features: Option<FeatureVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
    pub split: Split,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Record>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse { path: path.into(), line: idx + 1, message };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save(records: &[Record], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io { path: path.into(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DataError::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Checks that feature dimensions agree across the dataset and labels are set.
pub fn validate(records: &[Record]) -> Result<(), DataError> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let ctx_dim = first.context_features.len();
    let mut sum_dim = None;
    for r in records {
        if r.label.is_empty() {
            return Err(DataError::Invalid(format!("record {} has an empty label", r.id)));
        }
        if r.context_features.len() != ctx_dim {
            return Err(DataError::Invalid(format!(
                "record {} has {} context features, expected {ctx_dim}",
                r.id,
                r.context_features.len()
            )));
        }
        if let Some(s) = &r.summary_features {
            match sum_dim {
                None => sum_dim = Some(s.len()),
                Some(d) if d != s.len() => {
                    return Err(DataError::Invalid(format!(
                        "record {} has {} summary features, expected {d}",
                        r.id,
                        s.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Sorted distinct class names.
pub fn class_names(records: &[Record]) -> Vec<String> {
    records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpennessSplit {
    pub openness: f64,
    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    /// Train-split records of known classes only.
    pub train: Vec<Record>,
    /// All test-split records.
    pub test: Vec<Record>,
}

/// Serializable description of a split: class partition plus record ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub openness: f64,
    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// `floor(openness · n_classes)`; the small slack absorbs products such as
/// `0.3 · 10 = 2.9999999999999996`.
pub fn unknown_class_count(openness: f64, n_classes: usize) -> usize {
    (openness * n_classes as f64 + 1e-9).floor() as usize
}

pub fn make_openness_split<G: Rng + ?Sized>(
    records: &[Record],
    openness: f64,
    rng: &mut G,
) -> Result<OpennessSplit, DataError> {
    if !(openness > 0.0 && openness < 1.0) {
        return Err(DataError::Split(format!("openness must be in (0, 1), got {openness}")));
    }
    let classes = class_names(records);
    if classes.len() < 2 {
        return Err(DataError::Split(format!("need at least 2 classes, found {}", classes.len())));
    }
    let n_unknown = unknown_class_count(openness, classes.len());
    if n_unknown == 0 || n_unknown == classes.len() {
        return Err(DataError::Split(format!(
            "openness {openness} over {} classes leaves {n_unknown} unknown classes",
            classes.len()
        )));
    }
    let mut picked = index::sample(rng, classes.len(), n_unknown).into_vec();
    picked.sort_unstable();
    let unknown: BTreeSet<&str> = picked.iter().map(|&i| classes[i].as_str()).collect();
    let known_classes: Vec<String> = classes.iter().filter(|c| !unknown.contains(c.as_str())).cloned().collect();
    let unknown_classes: Vec<String> = unknown.iter().map(|s| s.to_string()).collect();
    let train: Vec<Record> = records
        .iter()
        .filter(|r| r.split == Split::Train && !unknown.contains(r.label.as_str()))
        .cloned()
        .collect();
    let test: Vec<Record> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let split = OpennessSplit { openness, known_classes, unknown_classes, train, test };
    split.check()?;
    Ok(split)
}

impl OpennessSplit {
    /// Known and unknown classes are disjoint and no training record is unknown.
    pub fn check(&self) -> Result<(), DataError> {
        let unknown: BTreeSet<&str> = self.unknown_classes.iter().map(String::as_str).collect();
        if let Some(c) = self.known_classes.iter().find(|c| unknown.contains(c.as_str())) {
            return Err(DataError::Split(format!("class {c} is both known and unknown")));
        }
        if let Some(r) = self.train.iter().find(|r| unknown.contains(r.label.as_str())) {
            return Err(DataError::Split(format!("training record {} carries unknown label {}", r.id, r.label)));
        }
        Ok(())
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            openness: self.openness,
            known_classes: self.known_classes.clone(),
            unknown_classes: self.unknown_classes.clone(),
            train_ids: self.train.iter().map(|r| r.id.clone()).collect(),
            test_ids: self.test.iter().map(|r| r.id.clone()).collect(),
        }
    }

    pub fn from_manifest(records: &[Record], manifest: &SplitManifest) -> Result<Self, DataError> {
        let by_id: BTreeMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let lookup = |ids: &[String]| -> Result<Vec<Record>, DataError> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|r| (*r).clone()).ok_or_else(|| {
                        DataError::Split(format!("manifest references unknown record {id}"))
                    })
                })
                .collect()
        };
        let split = Self {
            openness: manifest.openness,
            known_classes: manifest.known_classes.clone(),
            unknown_classes: manifest.unknown_classes.clone(),
            train: lookup(&manifest.train_ids)?,
            test: lookup(&manifest.test_ids)?,
        };
        split.check()?;
        Ok(split)
    }

    pub fn all_classes(&self) -> Vec<String> {
        let mut all: Vec<String> = self.known_classes.iter().chain(&self.unknown_classes).cloned().collect();
        all.sort();
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum pairwise distance between class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Noise of the summary view relative to `sigma`.
    pub summary_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            per_class: 200,
            dim: 16,
            separation: 6.0,
            sigma: 1.0,
            summary_noise: 1.0,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Gaussian mixture with a second, independently noisy view per sample.
///
/// With `n_classes <= dim` the means are `separation·σ` times a random
/// orthonormal set, so every pair is `√2·separation·σ` apart. Otherwise means
/// are drawn on the sphere of radius `separation·σ` by rejection.
pub fn synth_gaussian(cfg: &SynthConfig) -> Result<Vec<Record>, DataError> {
    if cfg.n_classes < 2 || cfg.per_class < 2 || cfg.dim == 0 {
        return Err(DataError::Synth("need n_classes >= 2, per_class >= 2 and dim >= 1".into()));
    }
    if !(cfg.separation > 0.0) || !(cfg.sigma > 0.0) || !(cfg.summary_noise >= 0.0) {
        return Err(DataError::Synth("separation and sigma must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(DataError::Synth("test_fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut rng)?;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| DataError::Synth(e.to_string()))?;
    let summary_sigma = cfg.sigma * cfg.summary_noise;
    let n_test = ((cfg.per_class as f64) * cfg.test_fraction).round() as usize;

    let mut records = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        order.shuffle(&mut rng);
        let test: BTreeSet<usize> = order[..n_test].iter().copied().collect();
        for k in 0..cfg.per_class {
            let ctx: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let summary: Vec<f64> = mean.iter().map(|m| m + summary_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            records.push(Record {
                id: format!("c{c:02}-{k:04}"),
                label: format!("type_{c:02}"),
                context_features: FeatureVector::new(ctx).map_err(|e| DataError::Synth(e.to_string()))?,
                summary_features: Some(FeatureVector::new(summary).map_err(|e| DataError::Synth(e.to_string()))?),
                context_text: None,
                summary_text: None,
                split: if test.contains(&k) { Split::Test } else { Split::Train },
                extra: serde_json::Map::new(),
            });
        }
    }
    Ok(records)
}

fn class_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, DataError> {
    let radius = cfg.separation * cfg.sigma;
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    };
    if cfg.n_classes <= cfg.dim {
        // Gram-Schmidt on Gaussian draws
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
        while basis.len() < cfg.n_classes {
            let mut v = gaussian(rng);
            for b in &basis {
                let p = numerics::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            if let Ok(u) = numerics::normalize(&v) {
                if numerics::norm(&v) > 1e-6 {
                    basis.push(u);
                }
            }
        }
        return Ok(basis.into_iter().map(|u| u.into_iter().map(|x| x * radius).collect()).collect());
    }
    const ATTEMPTS: usize = 10_000;
    let min_dist = cfg.separation * cfg.sigma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    let mut attempts = 0;
    while means.len() < cfg.n_classes {
        attempts += 1;
        if attempts > ATTEMPTS {
            return Err(DataError::Synth(format!(
                "could not place {} means {min_dist} apart in {} dimensions",
                cfg.n_classes, cfg.dim
            )));
        }
        let Ok(u) = numerics::normalize(&gaussian(rng)) else { continue };
        let m: Vec<f64> = u.into_iter().map(|x| x * radius).collect();
        if means.iter().all(|o| numerics::squared_distance(o, &m).sqrt() >= min_dist) {
            means.push(m);
        }
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> &'static str {
        concat!(
            r#"{"id":"d1","label":"ignore_question","context_features":[0.5,-1.0],"summary_features":[1.0,2.0],"context_text":"User: hi\nAgent: bye","split":"train","source":"fedi"}"#,
            "\n",
            r#"{"id":"d2","label":"factually_incorrect","context_features":[3.0,4.0],"split":"test"}"#,
            "\n"
        )
    }

    #[test]
    fn parses_fixture_field_for_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, fixture()).unwrap();
        let recs = load(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "d1");
        assert_eq!(recs[0].label, "ignore_question");
        assert_eq!(recs[0].context_features.as_slice(), &[0.5, -1.0]);
        assert_eq!(recs[0].summary_features.as_ref().unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(recs[0].context_text.as_deref(), Some("User: hi\nAgent: bye"));
        assert_eq!(recs[0].summary_text, None);
        assert_eq!(recs[0].split, Split::Train);
        assert_eq!(recs[0].extra.get("source"), Some(&serde_json::json!("fedi")));
        assert_eq!(recs[1].summary_features, None);
        assert_eq!(recs[1].split, Split::Test);
    }

    #[test]
    fn round_trip_preserves_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        std::fs::write(&a, fixture()).unwrap();
        let recs = load(&a).unwrap();
        save(&recs, &b).unwrap();
        assert_eq!(load(&b).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let text = format!("{}{{\"id\": broken\n", fixture());
        std::fs::write(&path, text).unwrap();
        match load(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let empty_label = r#"{"id":"x","label":"","context_features":[1.0],"split":"train"}"#;
        std::fs::write(&path, empty_label).unwrap();
        assert!(matches!(load(&path), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(load(dir.path().join("missing.jsonl")), Err(DataError::Io { .. })));
    }

    fn labeled(n_classes: usize) -> Vec<Record> {
        synth_gaussian(&SynthConfig { n_classes, per_class: 4, dim: 3, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn unknown_counts_follow_floor() {
        assert_eq!(unknown_class_count(0.25, 9), 2);
        assert_eq!(unknown_class_count(0.50, 9), 4);
        assert_eq!(unknown_class_count(0.75, 9), 6);
        assert_eq!(unknown_class_count(0.5, 2), 1);
        assert_eq!(unknown_class_count(0.3, 10), 3);
    }

    #[test]
    fn split_excludes_unknown_classes_from_training() {
        let recs = synth_gaussian(&SynthConfig { n_classes: 9, per_class: 8, dim: 12, ..SynthConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let split = make_openness_split(&recs, 0.5, &mut rng).unwrap();
        assert_eq!(split.unknown_classes.len(), 4);
        assert_eq!(split.known_classes.len(), 5);
        assert!(split.train.iter().all(|r| split.known_classes.contains(&r.label) && r.split == Split::Train));
        assert_eq!(split.test.len(), recs.iter().filter(|r| r.split == Split::Test).count());

        let again = make_openness_split(&recs, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, split);
        let back = OpennessSplit::from_manifest(&recs, &split.manifest()).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn split_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let two = labeled(2);
        assert_eq!(make_openness_split(&two, 0.5, &mut rng).unwrap().unknown_classes.len(), 1);
        assert!(make_openness_split(&two, 0.25, &mut rng).is_err());
        assert!(make_openness_split(&two, 1.0, &mut rng).is_err());
        let one: Vec<Record> = two.iter().filter(|r| r.label == "type_00").cloned().collect();
        assert!(make_openness_split(&one, 0.5, &mut rng).is_err());
    }

    #[test]
    fn synth_shapes_and_determinism() {
        let cfg = SynthConfig { n_classes: 5, per_class: 2, dim: 4, seed: 9, ..SynthConfig::default() };
        let a = synth_gaussian(&cfg).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, synth_gaussian(&cfg).unwrap());
        assert_ne!(a, synth_gaussian(&SynthConfig { seed: 10, ..cfg }).unwrap());
        validate(&a).unwrap();
    }

    #[test]
    fn synth_rejection_path_and_infeasible() {
        let ok = SynthConfig { n_classes: 5, per_class: 3, dim: 2, separation: 1.0, ..SynthConfig::default() };
        assert_eq!(synth_gaussian(&ok).unwrap().len(), 15);
        // at most 6 points on a circle can be a radius apart
        let bad = SynthConfig { n_classes: 8, dim: 2, ..SynthConfig::default() };
        assert!(matches!(synth_gaussian(&bad), Err(DataError::Synth(_))));
    }

    #[test]
    fn synth_is_nearest_centroid_separable() {
        let cfg = SynthConfig { seed: 1, ..SynthConfig::default() };
        let recs = synth_gaussian(&cfg).unwrap();
        let names = class_names(&recs);
        // empirical class means as the oracle's centroids
        let mut means = vec![vec![0.0; cfg.dim]; names.len()];
        for r in &recs {
            let c = names.iter().position(|n| *n == r.label).unwrap();
            means[c].iter_mut().zip(r.context_features.iter()).for_each(|(m, v)| *m += v / cfg.per_class as f64);
        }
        let correct = recs
            .iter()
            .filter(|r| {
                let best = (0..names.len())
                    .min_by(|&a, &b| {
                        numerics::squared_distance(&r.context_features, &means[a])
                            .total_cmp(&numerics::squared_distance(&r.context_features, &means[b]))
                    })
                    .unwrap();
                names[best] == r.label
            })
            .count();
        assert!(correct as f64 / recs.len() as f64 >= 0.999);
    }

    #[test]
    fn validate_catches_dimension_drift() {
        let mut recs = labeled(2);
        recs[1].context_features = FeatureVector::new(vec![1.0]).unwrap();
        assert!(validate(&recs).is_err());
    }
}

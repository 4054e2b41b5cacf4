//! End-to-end run: split, train, embed, cluster, evaluate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, OpennessSplit, Record, SynthConfig};
use crate::encoder::{self, EncoderError, Input, TrainConfig, Trained};
use crate::eval::{self, ClusterMode, EvalError, EvalReport, OpenWorld};
use crate::nnkmeans::NnkConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
}

/// Everything a run needs; every field has a default so partial config
/// files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub openness: f64,
    /// Clusters for open-world classification; defaults to the number of
    /// classes in the dataset.
    pub total_classes: Option<usize>,
    pub cluster_mode: ClusterMode,
    pub train: TrainConfig,
    pub cluster: NnkConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            openness: 0.25,
            total_classes: None,
            cluster_mode: ClusterMode::Transductive,
            train: TrainConfig::default(),
            cluster: NnkConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let err = |message: String| PipelineError::Config { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the run seed into the training and clustering seeds.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.train.nnk.seed = self.seed;
        c.cluster.seed = self.seed;
        c
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub split: OpennessSplit,
    pub trained: Trained,
    pub open_world: OpenWorld,
    pub report: EvalReport,
}

pub fn split(records: &[Record], cfg: &RunConfig) -> Result<OpennessSplit, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(data::make_openness_split(records, cfg.openness, &mut rng)?)
}

/// Clusters the test records with a trained encoder and scores the result.
pub fn evaluate(
    trained: &Trained,
    split: &OpennessSplit,
    total_classes: usize,
    cfg: &RunConfig,
) -> Result<(OpenWorld, EvalReport), PipelineError> {
    let threads = cfg.train.threads;
    let train_inputs: Vec<Input<'_>> = split.train.iter().map(Input::from).collect();
    let test_inputs: Vec<Input<'_>> = split.test.iter().map(Input::from).collect();
    let train_x = encoder::embed_parallel(&trained.params, &train_inputs, threads)?;
    let test_x = encoder::embed_parallel(&trained.params, &test_inputs, threads)?;
    let train_y: Vec<usize> = split
        .train
        .iter()
        .map(|r| trained.class_names.binary_search(&r.label).map_err(|_| unknown_label(&r.label)))
        .collect::<Result<_, _>>()?;
    let ow = eval::open_world_classify(&train_x, &train_y, &test_x, total_classes, &cfg.cluster, cfg.cluster_mode)?;
    let truth: Vec<String> = split.test.iter().map(|r| r.label.clone()).collect();
    let report = EvalReport::build(&ow.test_clusters, &truth, &split.known_classes, ow.novel_clusters())?;
    Ok((ow, report))
}

fn unknown_label(label: &str) -> PipelineError {
    PipelineError::Eval(EvalError::Precondition(format!("training label {label} is not a classifier class")))
}

pub fn run(records: &[Record], cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    let cfg = cfg.seeded();
    data::validate(records)?;
    let split = split(records, &cfg)?;
    let trained = encoder::train(&split.train, &cfg.train)?;
    let total = cfg.total_classes.unwrap_or(data::class_names(records).len());
    let (open_world, report) = evaluate(&trained, &split, total, &cfg)?;
    Ok(RunOutput { split, trained, open_world, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 5\n[train]\nepochs = 3\n[train.loss]\nmargin = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.margin, 0.5);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.openness, 0.25);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
    }

    #[test]
    fn small_run_is_deterministic() {
        let records = data::synth_gaussian(&SynthConfig { n_classes: 4, per_class: 30, dim: 8, seed: 1, ..SynthConfig::default() }).unwrap();
        let cfg = RunConfig {
            openness: 0.5,
            train: TrainConfig { epochs: 3, hidden: 16, rep_dim: 8, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        let a = run(&records, &cfg).unwrap();
        let b = run(&records, &cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.split.unknown_classes.len(), 2);
    }
}

//! Config file layout and flag overrides.

use std::path::Path;

use anyhow::Context;
use errdisc::eval::ClusterMode;
use errdisc::pipeline::RunConfig;
use errdisc_llm::ChatClientConfig;
use serde::{Deserialize, Serialize};

use crate::args::{Common, SamplingArg, TrainFlags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefineConfig {
    /// Clusters with fewer member contexts get no definition request.
    pub threshold: usize,
    /// Contexts quoted per prompt; a seeded sample when a cluster is larger.
    pub max_contexts: usize,
}

impl Default for DefineConfig {
    fn default() -> Self {
        Self { threshold: errdisc_llm::prompt::DEFAULT_THRESHOLD, max_contexts: 10 }
    }
}

/// Everything a command may read. Top-level keys are those of
/// [`RunConfig`]; `[llm]` and `[define]` configure definition generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub llm: ChatClientConfig,
    pub define: DefineConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (if any) with the common flags applied on top.
    pub fn resolve(common: &Common) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = common.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = common.threads {
            cfg.run.train.threads = t;
        }
        cfg.run = cfg.run.seeded();
        Ok(cfg)
    }

    pub fn apply_train(&mut self, f: &TrainFlags) {
        let t = &mut self.run.train;
        set(&mut t.epochs, f.epochs);
        set(&mut t.batch_size, f.batch_size);
        set(&mut t.learning_rate, f.lr);
        set(&mut t.loss.margin, f.margin);
        set(&mut t.loss.alpha, f.alpha);
        set(&mut t.loss.tau, f.tau);
        set(&mut t.hidden, f.hidden);
        set(&mut t.rep_dim, f.rep_dim);
        set(&mut t.top_k, f.top_k);
        if let Some(s) = f.sampling {
            t.sampling = s.into();
        }
        if f.ce_only {
            t.contrastive = false;
        }
    }

    pub fn apply_cluster(&mut self, total_classes: Option<usize>, mode: Option<ClusterMode>) {
        if total_classes.is_some() {
            self.run.total_classes = total_classes;
        }
        set(&mut self.run.cluster_mode, mode);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl From<SamplingArg> for errdisc::encoder::Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Lbsr => Self::Lbsr,
            SamplingArg::Random => Self::Random,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\nopenness = 0.5\n[train]\nepochs = 7\nbatch_size = 8\n[llm]\nmodel = \"m\"\n[define]\nthreshold = 3\n")
            .unwrap();
        let common = Common { config: Some(path), seed: Some(9), threads: None, log_level: "warn".into() };
        let mut cfg = CliConfig::resolve(&common).unwrap();
        cfg.apply_train(&TrainFlags { epochs: Some(2), ce_only: true, ..TrainFlags::default() });
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.run.train.seed, 9);
        assert_eq!(cfg.run.cluster.seed, 9);
        assert_eq!(cfg.run.openness, 0.5);
        assert_eq!(cfg.run.train.epochs, 2);
        assert_eq!(cfg.run.train.batch_size, 8);
        assert!(!cfg.run.train.contrastive);
        assert_eq!(cfg.llm.model, "m");
        assert_eq!(cfg.llm.max_retries, 3);
        assert_eq!(cfg.define.threshold, 3);
        let back: CliConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}

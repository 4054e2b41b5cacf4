//! Artifacts written by one stage and read back by the next.

use errdisc::data::{self, OpennessSplit, SplitManifest, SynthConfig};
use errdisc::encoder::{self, EncoderParams, Input, TrainConfig};
use errdisc::eval::ClusterMode;
use errdisc::pipeline::{self, RunConfig};

fn small() -> Vec<data::Record> {
    data::synth_gaussian(&SynthConfig { n_classes: 4, per_class: 24, dim: 6, seed: 11, ..SynthConfig::default() }).unwrap()
}

fn quick() -> RunConfig {
    RunConfig {
        seed: 2,
        openness: 0.5,
        train: TrainConfig { epochs: 3, hidden: 8, rep_dim: 4, batch_size: 6, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let records = small();
    data::save(&records, &path).unwrap();
    assert_eq!(data::load(&path).unwrap(), records);
}

#[test]
fn manifest_rebuilds_the_same_split() {
    let records = small();
    let split = pipeline::split(&records, &quick()).unwrap();
    let json = serde_json::to_string(&split.manifest()).unwrap();
    let manifest: SplitManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(OpennessSplit::from_manifest(&records, &manifest).unwrap(), split);
}

#[test]
fn checkpoint_reproduces_the_report() {
    let records = small();
    let cfg = quick().seeded();
    let out = pipeline::run(&records, &cfg).unwrap();
    let text = out.trained.params.to_text(&out.trained.class_names);
    let (params, names) = EncoderParams::from_text(&text).unwrap();
    assert_eq!(names, out.trained.class_names);
    let inputs: Vec<Input<'_>> = out.split.test.iter().map(Input::from).collect();
    assert_eq!(encoder::embed(&params, &inputs).unwrap(), encoder::embed(&out.trained.params, &inputs).unwrap());
    let reloaded = encoder::Trained { params, class_names: names, history: Default::default() };
    let (_, report) = pipeline::evaluate(&reloaded, &out.split, 4, &cfg).unwrap();
    assert_eq!(report.to_json(), out.report.to_json());
}

#[test]
fn test_only_mode_runs_and_differs_only_in_clustering() {
    let records = small();
    let mut cfg = quick();
    cfg.cluster_mode = ClusterMode::TestOnly;
    let a = pipeline::run(&records, &cfg).unwrap();
    let b = pipeline::run(&records, &quick()).unwrap();
    assert_eq!(a.trained.params, b.trained.params);
    assert_eq!(a.open_world.test_clusters.len(), a.split.test.len());
    assert!(a.open_world.test_clusters.iter().all(|&c| c < 4));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let cfg = quick();
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    let missing = dir.path().join("missing.toml");
    let err = RunConfig::load(&missing).unwrap_err().to_string();
    assert!(err.contains("missing.toml"), "{err}");
}

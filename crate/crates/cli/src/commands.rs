//! Subcommand bodies. Each returns `Ok` or an error that `main` maps to an
//! exit code: [`UsageError`] is 1, anything else is 2.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use errdisc::data::{self, OpennessSplit, Record, SplitManifest};
use errdisc::encoder::{self, EncoderParams, Input, TrainHistory, Trained};
use errdisc::eval::{EvalReport, OpenWorld};
use errdisc::lbsr::{self, LbsrConfig};
use errdisc::nnkmeans::AtomLabel;
use errdisc::pipeline;
use errdisc_llm::{define_clusters, ChatClient, ClusterSample, DefinitionRequest, KnownDefinition, PromptOptions};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{DefineArgs, EvalArgs, RankArgs, RunArgs, SplitArgs, SynthArgs, TrainArgs};
use crate::config::{set, CliConfig};

/// Invalid combination of otherwise well-formed flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// One test sample's cluster. `label` is the ground truth; `assigned` is
/// the atom label the clustering gave it, absent when novel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub cluster: usize,
    pub label: String,
    #[serde(default)]
    pub assigned: Option<String>,
    #[serde(default)]
    pub novel_cluster: bool,
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn echo_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.config.toml", out.display()))
}

fn load_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    let records = data::load(path)?;
    data::validate(&records).with_context(|| format!("validating {}", path.display()))?;
    Ok(records)
}

fn load_split(records: &[Record], manifest: Option<&Path>, cfg: &CliConfig) -> anyhow::Result<OpennessSplit> {
    match manifest {
        Some(p) => {
            let m: SplitManifest = read_json(p)?;
            OpennessSplit::from_manifest(records, &m).with_context(|| format!("applying {}", p.display()))
        }
        None => Ok(pipeline::split(records, &cfg.run)?),
    }
}

fn manifest_json(split: &OpennessSplit) -> String {
    serde_json::to_string_pretty(&split.manifest()).expect("manifest serializes") + "\n"
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(EncoderParams, Vec<String>)> {
    EncoderParams::from_text(&read(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn prediction_rows(split: &OpennessSplit, ow: &OpenWorld, class_names: &[String], novel: &[usize]) -> Vec<PredictionRow> {
    split
        .test
        .iter()
        .enumerate()
        .map(|(i, r)| PredictionRow {
            id: r.id.clone(),
            cluster: ow.test_clusters[i],
            label: r.label.clone(),
            assigned: match ow.test_labels[i] {
                AtomLabel::Class(c) => Some(class_names[c].clone()),
                AtomLabel::Novel => None,
            },
            novel_cluster: novel.contains(&ow.test_clusters[i]),
        })
        .collect()
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

fn report_json(report: &EvalReport) -> String {
    report.to_json() + "\n"
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    let s = &mut cfg.run.synth;
    set(&mut s.n_classes, a.classes);
    set(&mut s.per_class, a.per_class);
    set(&mut s.dim, a.dim);
    set(&mut s.separation, a.separation);
    set(&mut s.sigma, a.sigma);
    set(&mut s.summary_noise, a.summary_noise);
    set(&mut s.test_fraction, a.test_fraction);
    set(&mut s.seed, a.common.seed);
    let records = data::synth_gaussian(&cfg.run.synth)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    data::save(&records, &a.out)?;
    write(&echo_path(&a.out), &cfg.to_toml())?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

pub fn split(a: &SplitArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    set(&mut cfg.run.openness, a.openness);
    let records = load_records(&a.data)?;
    let split = pipeline::split(&records, &cfg.run)?;
    write(&a.out, &manifest_json(&split))?;
    write(&echo_path(&a.out), &cfg.to_toml())?;
    println!(
        "{} known / {} unknown classes; {} train / {} test records",
        split.known_classes.len(),
        split.unknown_classes.len(),
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    set(&mut cfg.run.openness, a.openness);
    cfg.apply_train(&a.train);
    let records = load_records(&a.data)?;
    let split = load_split(&records, a.split.as_deref(), &cfg)?;
    let trained = encoder::train(&split.train, &cfg.run.train)?;
    let dir = &a.out_dir;
    write(&dir.join("encoder.ckpt"), &trained.params.to_text(&trained.class_names))?;
    write(&dir.join("history.csv"), &trained.history.to_csv())?;
    write(&dir.join("split.json"), &manifest_json(&split))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    if let Some(last) = trained.history.epochs.last() {
        println!("epoch {}: loss {:.6} (ce {:.6}, cl {:.6})", last.epoch, last.total, last.ce, last.cl);
    }
    println!("wrote {}", dir.join("encoder.ckpt").display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    set(&mut cfg.run.openness, a.openness);
    cfg.apply_cluster(a.total_classes, a.cluster_mode.map(Into::into));
    let report = if let Some(ckpt) = &a.checkpoint {
        let data_path = a.data.as_deref().ok_or_else(|| usage("--checkpoint needs --data"))?;
        let records = load_records(data_path)?;
        let split = load_split(&records, a.split.as_deref(), &cfg)?;
        let (params, class_names) = load_checkpoint(ckpt)?;
        let trained = Trained { params, class_names, history: TrainHistory::default() };
        let total = cfg.run.total_classes.unwrap_or(data::class_names(&records).len());
        let (ow, report) = pipeline::evaluate(&trained, &split, total, &cfg.run)?;
        if let Some(p) = &a.predictions_out {
            write(p, &jsonl(&prediction_rows(&split, &ow, &trained.class_names, &report.novel_clusters)))?;
        }
        report
    } else {
        let path = a.predictions.as_deref().expect("clap requires a source");
        if a.predictions_out.is_some() {
            return Err(usage("--predictions-out only applies with --checkpoint"));
        }
        let rows: Vec<PredictionRow> = read(path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
            .collect::<anyhow::Result<_>>()?;
        if rows.is_empty() {
            bail!("{} holds no predictions", path.display());
        }
        let known = match (&a.split, &a.known) {
            (Some(s), _) => read_json::<SplitManifest>(s)?.known_classes,
            (None, Some(k)) => k.clone(),
            (None, None) => return Err(usage("--predictions needs --split or --known")),
        };
        let clusters: Vec<usize> = rows.iter().map(|r| r.cluster).collect();
        let truth: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
        let novel: Vec<usize> =
            rows.iter().filter(|r| r.novel_cluster).map(|r| r.cluster).collect::<BTreeSet<_>>().into_iter().collect();
        EvalReport::build(&clusters, &truth, &known, novel)?
    };
    write(&a.out, &report_json(&report))?;
    write(&echo_path(&a.out), &cfg.to_toml())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn rank(a: &RankArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    set(&mut cfg.run.openness, a.openness);
    set(&mut cfg.run.train.top_k, a.top_k);
    let records = load_records(&a.data)?;
    let split = load_split(&records, a.split.as_deref(), &cfg)?;
    let names = data::class_names(&split.train);
    let xs: Vec<Vec<f64>> = match &a.checkpoint {
        Some(p) => {
            let (params, _) = load_checkpoint(p)?;
            let inputs: Vec<Input<'_>> = split.train.iter().map(Input::from).collect();
            encoder::embed_parallel(&params, &inputs, cfg.run.train.threads)?
        }
        None => split.train.iter().map(|r| r.context_features.to_vec()).collect(),
    };
    let labels: Vec<usize> =
        split.train.iter().map(|r| names.binary_search(&r.label).expect("label from the same records")).collect();
    let lcfg = LbsrConfig { top_k: cfg.run.train.top_k, nnk: cfg.run.train.nnk, ..LbsrConfig::default() };
    let pools = lbsr::rank(&xs, &labels, names.len(), &lcfg)?;
    let ids: Vec<String> = split.train.iter().map(|r| r.id.clone()).collect();
    write(&a.out, &pools.to_tsv(&ids, &names))?;
    write(&echo_path(&a.out), &cfg.to_toml())?;
    let t = pools.total_sizes();
    println!(
        "soft_pos {} hard_pos {} soft_neg {} hard_neg {}",
        t.soft_pos, t.hard_pos, t.soft_neg, t.hard_neg
    );
    Ok(())
}

#[derive(Serialize)]
struct DefinitionOut<'a> {
    cluster: usize,
    name: &'a str,
    definition: &'a str,
    supporting_context_ids: &'a [String],
}

pub fn define(a: &DefineArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    let l = &mut cfg.llm;
    if a.stub {
        l.stub = true;
    }
    set(&mut l.endpoint, a.endpoint.clone());
    set(&mut l.model, a.model.clone());
    set(&mut l.token_env, a.token_env.clone());
    set(&mut l.temperature, a.temperature);
    set(&mut l.max_retries, a.max_retries);
    set(&mut l.timeout_secs, a.timeout_secs);
    set(&mut l.max_concurrency, a.max_concurrency);
    set(&mut cfg.define.threshold, a.threshold);
    set(&mut cfg.define.max_contexts, a.max_contexts);
    let (threshold, max_contexts) = (cfg.define.threshold, cfg.define.max_contexts);
    if max_contexts < threshold.max(1) {
        return Err(usage(format!("--max-contexts {max_contexts} is below --threshold {threshold}")));
    }

    let records = data::load(&a.data)?;
    let by_id: BTreeMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let rows: Vec<PredictionRow> = read(&a.predictions)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", a.predictions.display(), i + 1)))
        .collect::<anyhow::Result<_>>()?;
    let known: Vec<KnownDefinition> = read_json(&a.known_definitions)?;
    let per_prompt = errdisc_llm::prompt::KNOWN_DEFINITIONS;
    if known.len() < per_prompt {
        bail!("{} lists {} definitions; at least {per_prompt} are needed", a.known_definitions.display(), known.len());
    }

    let mut clusters: BTreeMap<usize, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.novel_cluster) {
        clusters.entry(r.cluster).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut requests = Vec::new();
    for (&cluster, members) in &clusters {
        let mut picked: Vec<usize> = if members.len() > max_contexts {
            index::sample(&mut rng, members.len(), max_contexts).into_vec()
        } else {
            (0..members.len()).collect()
        };
        picked.sort_unstable();
        let samples = picked
            .into_iter()
            .map(|i| {
                let id = &members[i].id;
                let r = by_id.get(id.as_str()).with_context(|| format!("{id} is not in {}", a.data.display()))?;
                let context = r.context_text.clone().with_context(|| format!("record {id} has no context_text"))?;
                Ok(ClusterSample { id: id.clone(), context, summary: r.summary_text.clone() })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let known = index::sample(&mut rng, known.len(), per_prompt).into_iter().map(|i| known[i].clone()).collect();
        requests.push(DefinitionRequest { cluster, samples, known });
    }
    let skipped = requests.iter().filter(|r| r.samples.len() < threshold).count();
    let client = ChatClient::new(cfg.llm.clone());
    let existing: Vec<String> = known.iter().map(|k| k.name.clone()).collect();
    let results = define_clusters(&client, &requests, &existing, threshold, &PromptOptions::default())?;

    let mut out = Vec::new();
    let mut failed = 0;
    for c in &results {
        match &c.result {
            Ok(d) => {
                println!("cluster {}: {}", c.cluster, d.name);
                out.push(DefinitionOut {
                    cluster: c.cluster,
                    name: &d.name,
                    definition: &d.definition,
                    supporting_context_ids: &d.supporting_context_ids,
                });
            }
            Err(e) => {
                eprintln!("cluster {}: {e}", c.cluster);
                failed += 1;
            }
        }
    }
    write(&a.out, &(serde_json::to_string_pretty(&out).expect("definitions serialize") + "\n"))?;
    write(&echo_path(&a.out), &cfg.to_toml())?;
    println!("{} defined, {skipped} below threshold {threshold}, {failed} failed", out.len());
    if failed > 0 {
        bail!("{failed} definition requests failed");
    }
    Ok(())
}

pub fn run(a: &RunArgs) -> anyhow::Result<()> {
    let mut cfg = CliConfig::resolve(&a.common)?;
    set(&mut cfg.run.openness, a.openness);
    cfg.apply_train(&a.train);
    cfg.apply_cluster(a.total_classes, a.cluster_mode.map(Into::into));
    let dir = &a.out_dir;
    let records = match &a.data {
        Some(p) => load_records(p)?,
        None => {
            let records = data::synth_gaussian(&cfg.run.synth)?;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            data::save(&records, dir.join("data.jsonl"))?;
            records
        }
    };
    let out = pipeline::run(&records, &cfg.run)?;
    let rows = prediction_rows(&out.split, &out.open_world, &out.trained.class_names, &out.report.novel_clusters);
    write(&dir.join("split.json"), &manifest_json(&out.split))?;
    write(&dir.join("encoder.ckpt"), &out.trained.params.to_text(&out.trained.class_names))?;
    write(&dir.join("history.csv"), &out.trained.history.to_csv())?;
    write(&dir.join("eval_report.json"), &report_json(&out.report))?;
    write(&dir.join("predictions.jsonl"), &jsonl(&rows))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    print!("{}", out.report.to_table());
    Ok(())
}

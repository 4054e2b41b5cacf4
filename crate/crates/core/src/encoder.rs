//! Two-tower feedforward encoder, aggregation layer and classification head,
//! plus the training loop that augments every batch with ranked counterparts.
//!
//! ```text
//! u = W2 tanh(W1 x_ctx + b1) + b2          context tower
//! v = W2' tanh(W1' x_sum + b1') + b2'      summary tower (zeros when absent)
//! z = A [u; v] + a                         representation
//! logits = C z + c
//! ```

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Record;
use crate::lbsr::{self, LbsrConfig, LbsrError, PoolSizes, RankedPools};
use crate::loss::{self, LossConfig, LossError};
use crate::nnkmeans::NnkConfig;
use crate::numerics::NumericsError;

const CHECKPOINT_HEADER: &str = "errdisc-encoder v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Lbsr(#[from] LbsrError),
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training precondition violated: {0}")]
    Precondition(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

/// Dense affine map with a row-major `out_dim × in_dim` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { out_dim, in_dim, weight: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<G: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut G) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..out_dim * in_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self { out_dim, in_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Adds `g xᵀ` and `g` into `grad`; returns `Wᵀ g`.
    fn backward(&self, grad: &mut Linear, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            let base = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.weight[base + i] += go * x[i];
                dx[i] += go * self.weight[base + i];
            }
        }
        dx
    }
}

/// One tanh hidden layer followed by a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub hidden: Linear,
    pub output: Linear,
}

impl Tower {
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = self.hidden.apply(x).into_iter().map(f64::tanh).collect();
        let out = self.output.apply(&h);
        (h, out)
    }

    fn backward(&self, grad: &mut Tower, x: &[f64], h: &[f64], g_out: &[f64]) {
        let dh = self.output.backward(&mut grad.output, h, g_out);
        let da: Vec<f64> = dh.iter().zip(h).map(|(d, v)| d * (1.0 - v * v)).collect();
        self.hidden.backward(&mut grad.hidden, x, &da);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub context_in: usize,
    pub summary_in: usize,
    pub hidden: usize,
    pub rep: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub context: Tower,
    pub summary: Tower,
    pub aggregation: Linear,
    pub classifier: Linear,
}

const BLOCK_NAMES: [&str; 12] = [
    "context.hidden.weight",
    "context.hidden.bias",
    "context.output.weight",
    "context.output.bias",
    "summary.hidden.weight",
    "summary.hidden.bias",
    "summary.output.weight",
    "summary.output.bias",
    "aggregation.weight",
    "aggregation.bias",
    "classifier.weight",
    "classifier.bias",
];

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        let tower = |d_in| Tower { hidden: Linear::zeros(dims.hidden, d_in), output: Linear::zeros(dims.rep, dims.hidden) };
        Self {
            context: tower(dims.context_in),
            summary: tower(dims.summary_in),
            aggregation: Linear::zeros(dims.rep, 2 * dims.rep),
            classifier: Linear::zeros(dims.classes, dims.rep),
        }
    }

    pub fn init<G: Rng + ?Sized>(dims: EncoderDims, rng: &mut G) -> Self {
        let tower = |d_in, rng: &mut G| Tower {
            hidden: Linear::xavier(dims.hidden, d_in, rng),
            output: Linear::xavier(dims.rep, dims.hidden, rng),
        };
        let context = tower(dims.context_in, rng);
        let summary = tower(dims.summary_in, rng);
        Self {
            context,
            summary,
            aggregation: Linear::xavier(dims.rep, 2 * dims.rep, rng),
            classifier: Linear::xavier(dims.classes, dims.rep, rng),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            context_in: self.context.hidden.in_dim,
            summary_in: self.summary.hidden.in_dim,
            hidden: self.context.hidden.out_dim,
            rep: self.aggregation.out_dim,
            classes: self.classifier.out_dim,
        }
    }

    fn shapes(&self) -> [(usize, usize); 12] {
        let lin = |l: &Linear| [(l.out_dim, l.in_dim), (1, l.out_dim)];
        let [a, b] = lin(&self.context.hidden);
        let [c, d] = lin(&self.context.output);
        let [e, f] = lin(&self.summary.hidden);
        let [g, h] = lin(&self.summary.output);
        let [i, j] = lin(&self.aggregation);
        let [k, l] = lin(&self.classifier);
        [a, b, c, d, e, f, g, h, i, j, k, l]
    }

    fn blocks(&self) -> [&Vec<f64>; 12] {
        [
            &self.context.hidden.weight,
            &self.context.hidden.bias,
            &self.context.output.weight,
            &self.context.output.bias,
            &self.summary.hidden.weight,
            &self.summary.hidden.bias,
            &self.summary.output.weight,
            &self.summary.output.bias,
            &self.aggregation.weight,
            &self.aggregation.bias,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.context.hidden.weight,
            &mut self.context.hidden.bias,
            &mut self.context.output.weight,
            &mut self.context.output.bias,
            &mut self.summary.hidden.weight,
            &mut self.summary.hidden.bias,
            &mut self.summary.output.weight,
            &mut self.summary.output.bias,
            &mut self.aggregation.weight,
            &mut self.aggregation.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), EncoderError> {
        let n = self.n_params();
        if values.len() != n {
            return Err(EncoderError::Dimension { what: "flat parameters", expected: n, got: values.len() });
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Versioned text checkpoint: a dims header, the class names, then one
    /// `name rows cols` header per weight block followed by its rows.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let d = self.dims();
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(
            out,
            "context_in {} summary_in {} hidden {} rep {} classes {}",
            d.context_in, d.summary_in, d.hidden, d.rep, d.classes
        );
        for name in class_names {
            let _ = writeln!(out, "class {name}");
        }
        for ((name, (rows, cols)), block) in BLOCK_NAMES.iter().zip(self.shapes()).zip(self.blocks()) {
            let _ = writeln!(out, "{name} {rows} {cols}");
            for r in 0..rows {
                let row: Vec<String> = block[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }

    /// Inverse of [`EncoderParams::to_text`]; returns the params and class names.
    pub fn from_text(text: &str) -> Result<(Self, Vec<String>), EncoderError> {
        let err = |line: usize, message: String| EncoderError::Checkpoint { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_HEADER => {}
            Some((n, l)) => return Err(err(n, format!("expected {CHECKPOINT_HEADER:?}, found {l:?}"))),
            None => return Err(err(1, "empty checkpoint".into())),
        }
        let (n, dims_line) = lines.next().ok_or_else(|| err(2, "missing dims line".into()))?;
        let tokens: Vec<&str> = dims_line.split_whitespace().collect();
        let keys = ["context_in", "summary_in", "hidden", "rep", "classes"];
        if tokens.len() != 10 || tokens.iter().step_by(2).zip(keys).any(|(t, k)| *t != k) {
            return Err(err(n, format!("malformed dims line {dims_line:?}")));
        }
        let mut vals = [0usize; 5];
        for (slot, tok) in vals.iter_mut().zip(tokens.iter().skip(1).step_by(2)) {
            *slot = tok.parse().map_err(|_| err(n, format!("bad dimension {tok:?}")))?;
        }
        let dims = EncoderDims { context_in: vals[0], summary_in: vals[1], hidden: vals[2], rep: vals[3], classes: vals[4] };
        let mut params = Self::zeros(dims);
        let shapes = params.shapes();

        let mut class_names = Vec::with_capacity(dims.classes);
        for _ in 0..dims.classes {
            let (n, l) = lines.next().ok_or_else(|| err(0, "missing class names".into()))?;
            let name = l.strip_prefix("class ").ok_or_else(|| err(n, format!("expected class line, found {l:?}")))?;
            class_names.push(name.to_string());
        }
        for ((name, (rows, cols)), block) in BLOCK_NAMES.iter().zip(shapes).zip(params.blocks_mut()) {
            let (n, header) = lines.next().ok_or_else(|| err(0, format!("missing block {name}")))?;
            let expected = format!("{name} {rows} {cols}");
            if header.trim() != expected {
                return Err(err(n, format!("expected {expected:?}, found {header:?}")));
            }
            for r in 0..rows {
                let (n, row) = lines.next().ok_or_else(|| err(0, format!("block {name} is truncated")))?;
                let values: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| err(n, format!("bad number {t:?}"))))
                    .collect::<Result<_, _>>()?;
                if values.len() != cols || values.iter().any(|v| !v.is_finite()) {
                    return Err(err(n, format!("expected {cols} finite values")));
                }
                block[r * cols..(r + 1) * cols].copy_from_slice(&values);
            }
        }
        if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(n, format!("trailing content {l:?}")));
        }
        Ok((params, class_names))
    }
}

/// Feature views of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input<'a> {
    pub context: &'a [f64],
    pub summary: Option<&'a [f64]>,
}

impl<'a> From<&'a Record> for Input<'a> {
    fn from(r: &'a Record) -> Self {
        Self { context: r.context_features.as_slice(), summary: r.summary_features.as_ref().map(|s| s.as_slice()) }
    }
}

struct Cache {
    summary_in: Vec<f64>,
    ctx_h: Vec<f64>,
    sum_h: Vec<f64>,
    concat: Vec<f64>,
    rep: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_cached(params: &EncoderParams, input: Input<'_>) -> Result<Cache, EncoderError> {
    let d = params.dims();
    if input.context.len() != d.context_in {
        return Err(EncoderError::Dimension { what: "context features", expected: d.context_in, got: input.context.len() });
    }
    let summary_in = match input.summary {
        Some(s) if s.len() != d.summary_in => {
            return Err(EncoderError::Dimension { what: "summary features", expected: d.summary_in, got: s.len() })
        }
        Some(s) => s.to_vec(),
        None => vec![0.0; d.summary_in],
    };
    let (ctx_h, ctx_out) = params.context.forward(input.context);
    let (sum_h, sum_out) = params.summary.forward(&summary_in);
    let concat: Vec<f64> = ctx_out.into_iter().chain(sum_out).collect();
    let rep = params.aggregation.apply(&concat);
    let logits = params.classifier.apply(&rep);
    Ok(Cache { summary_in, ctx_h, sum_h, concat, rep, logits })
}

/// Returns `(representation, logits)`.
pub fn forward(
    params: &EncoderParams,
    context: &[f64],
    summary: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
    let c = forward_cached(params, Input { context, summary })?;
    Ok((c.rep, c.logits))
}

/// Representations in input order.
pub fn embed<'a, I>(params: &EncoderParams, inputs: &[I]) -> Result<Vec<Vec<f64>>, EncoderError>
where
    I: Copy + Into<Input<'a>>,
{
    inputs.iter().map(|&i| forward_cached(params, i.into()).map(|c| c.rep)).collect()
}

/// [`embed`] split across `threads` scoped workers; output order is preserved.
pub fn embed_parallel(params: &EncoderParams, inputs: &[Input<'_>], threads: usize) -> Result<Vec<Vec<f64>>, EncoderError> {
    if threads <= 1 || inputs.len() < 2 {
        return embed(params, inputs);
    }
    let chunk = inputs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<f64>>, EncoderError>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs.chunks(chunk).map(|c| s.spawn(move || embed(params, c))).collect();
        handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(inputs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub cl: f64,
}

/// Loss of one augmented batch and its gradient with respect to every
/// parameter. The first `n_anchors` inputs are anchors; only they feed the
/// classifier. With `contrastive == false` the objective is cross-entropy
/// alone.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    inputs: &[Input<'_>],
    labels: &[usize],
    n_anchors: usize,
    cfg: &LossConfig,
    contrastive: bool,
) -> Result<(BatchLoss, EncoderParams), EncoderError> {
    if labels.len() != inputs.len() {
        return Err(EncoderError::Dimension { what: "batch labels", expected: inputs.len(), got: labels.len() });
    }
    if n_anchors == 0 || n_anchors > inputs.len() {
        return Err(EncoderError::Dimension { what: "anchor count", expected: inputs.len(), got: n_anchors });
    }
    let caches: Vec<Cache> = inputs.iter().map(|&i| forward_cached(params, i)).collect::<Result<_, _>>()?;
    let reps: Vec<&[f64]> = caches.iter().map(|c| c.rep.as_slice()).collect();
    let logits: Vec<&[f64]> = caches[..n_anchors].iter().map(|c| c.logits.as_slice()).collect();
    let value = if contrastive {
        loss::joint_loss(&reps, &logits, labels, cfg)?
    } else {
        loss::cross_entropy_only(&reps, &logits, labels, cfg)?
    };

    let mut grad = EncoderParams::zeros(params.dims());
    let rep_dim = params.dims().rep;
    for (idx, (cache, input)) in caches.iter().zip(inputs).enumerate() {
        let mut g_rep = value.grad_reps[idx].clone();
        if idx < n_anchors {
            let from_logits = params.classifier.backward(&mut grad.classifier, &cache.rep, &value.grad_logits[idx]);
            g_rep.iter_mut().zip(from_logits).for_each(|(g, l)| *g += l);
        }
        if g_rep.iter().all(|&g| g == 0.0) {
            continue;
        }
        let g_concat = params.aggregation.backward(&mut grad.aggregation, &cache.concat, &g_rep);
        params.context.backward(&mut grad.context, input.context, &cache.ctx_h, &g_concat[..rep_dim]);
        params.summary.backward(&mut grad.summary, &cache.summary_in, &cache.sum_h, &g_concat[rep_dim..]);
    }
    Ok((BatchLoss { total: value.total, ce: value.ce_part, cl: value.cl_part }, grad))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Counterparts served by the ranked pools.
    Lbsr,
    /// Uniform same-class positive and other-class negative.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub top_k: usize,
    pub seed: u64,
    pub hidden: usize,
    pub rep_dim: usize,
    /// Adds the contrastive term; `false` trains on cross-entropy alone.
    pub contrastive: bool,
    pub sampling: Sampling,
    pub nnk: NnkConfig,
    /// Workers used to embed the training set each epoch.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            loss: LossConfig::default(),
            top_k: 10,
            seed: 0,
            hidden: 64,
            rep_dim: 16,
            contrastive: true,
            sampling: Sampling::Lbsr,
            nnk: NnkConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EncoderError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(EncoderError::InvalidConfig(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(EncoderError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.hidden == 0 || self.rep_dim == 0 {
            return Err(EncoderError::InvalidConfig("hidden and rep_dim must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(EncoderError::InvalidConfig("top_k must be positive".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub cl: f64,
    /// Pool sizes right after the epoch's rebuild, summed over classes.
    pub pools: PoolSizes,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,ce,cl,soft_pos,hard_pos,soft_neg,hard_neg\n");
        for e in &self.epochs {
            let p = e.pools;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.total, e.ce, e.cl, p.soft_pos, p.hard_pos, p.soft_neg, p.hard_neg
            );
        }
        out
    }
}

/// A trained encoder and the class names its classifier indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: EncoderParams,
    pub class_names: Vec<String>,
    pub history: TrainHistory,
}

/// Trains on `records`, whose labels are the known classes.
pub fn train(records: &[Record], cfg: &TrainConfig) -> Result<Trained, EncoderError> {
    cfg.validate()?;
    let class_names = crate::data::class_names(records);
    if class_names.len() < 2 {
        return Err(EncoderError::Precondition(format!("need at least 2 classes, found {}", class_names.len())));
    }
    let labels: Vec<usize> =
        records.iter().map(|r| class_names.binary_search(&r.label).expect("label from class_names")).collect();
    let mut counts = vec![0usize; class_names.len()];
    labels.iter().for_each(|&y| counts[y] += 1);
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(EncoderError::Precondition(format!("class {} has fewer than 2 samples", class_names[c])));
    }
    let first = &records[0];
    let context_in = first.context_features.len();
    let summary_in = records
        .iter()
        .find_map(|r| r.summary_features.as_ref().map(|s| s.len()))
        .unwrap_or(context_in);
    let dims = EncoderDims { context_in, summary_in, hidden: cfg.hidden, rep: cfg.rep_dim, classes: class_names.len() };
    let inputs: Vec<Input<'_>> = records.iter().map(Input::from).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = EncoderParams::init(dims, &mut rng);
    let mut adam = Adam::new(params.n_params(), cfg.learning_rate);
    let mut flat = params.flat();
    let by_class: Vec<Vec<usize>> =
        (0..class_names.len()).map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut pools = None;
        let mut pool_sizes = PoolSizes::default();
        if cfg.contrastive && cfg.sampling == Sampling::Lbsr {
            let reps = embed_parallel(&params, &inputs, cfg.threads)?;
            let lbsr_cfg = LbsrConfig {
                top_k: cfg.top_k,
                nnk: NnkConfig { seed: cfg.nnk.seed.wrapping_add(epoch as u64), ..cfg.nnk },
                ..LbsrConfig::default()
            };
            let ranked = lbsr::rank(&reps, &labels, class_names.len(), &lbsr_cfg)?;
            pool_sizes = ranked.total_sizes();
            pools = Some(ranked);
        }
        order.shuffle(&mut rng);

        let (mut total, mut ce, mut cl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut members: Vec<usize> = chunk.to_vec();
            if cfg.contrastive {
                let mut plus = Vec::with_capacity(chunk.len());
                let mut minus = Vec::with_capacity(chunk.len());
                for &a in chunk {
                    let (p, m) = counterparts(a, &labels, &by_class, pools.as_mut(), &mut rng)?;
                    plus.push(p);
                    minus.push(m);
                }
                members.extend(plus);
                members.extend(minus);
            }
            let batch_inputs: Vec<Input<'_>> = members.iter().map(|&i| inputs[i]).collect();
            let batch_labels: Vec<usize> = members.iter().map(|&i| labels[i]).collect();
            let (value, grad) =
                batch_loss_and_grad(&params, &batch_inputs, &batch_labels, chunk.len(), &cfg.loss, cfg.contrastive)?;
            adam.step(&mut flat, &grad.flat());
            params.set_flat(&flat)?;
            total += value.total;
            ce += value.ce;
            cl += value.cl;
            batches += 1;
        }
        let b = batches as f64;
        history.epochs.push(EpochStats { epoch: epoch + 1, total: total / b, ce: ce / b, cl: cl / b, pools: pool_sizes });
        log::debug!("epoch {} total {:.6} ce {:.6} cl {:.6}", epoch + 1, total / b, ce / b, cl / b);
    }
    Ok(Trained { params, class_names, history })
}

/// Positive and negative for `anchor`: from the pools when present, falling
/// back to a uniform same-class sample when the pools have no positive left.
fn counterparts<G: Rng + ?Sized>(
    anchor: usize,
    labels: &[usize],
    by_class: &[Vec<usize>],
    pools: Option<&mut RankedPools>,
    rng: &mut G,
) -> Result<(usize, usize), EncoderError> {
    let uniform_positive = |rng: &mut G| {
        let same = &by_class[labels[anchor]];
        let others: Vec<usize> = same.iter().copied().filter(|&i| i != anchor).collect();
        others[rng.random_range(0..others.len())]
    };
    match pools {
        Some(p) => match p.draw_pair(anchor, rng) {
            Ok(pair) => Ok(pair),
            Err(LbsrError::NoPositive { .. }) => {
                // the negative was already consumed; draw it again uniformly
                let minus = uniform_negative(anchor, labels, rng);
                Ok((uniform_positive(rng), minus))
            }
            Err(e) => Err(e.into()),
        },
        None => {
            let minus = uniform_negative(anchor, labels, rng);
            Ok((uniform_positive(rng), minus))
        }
    }
}

fn uniform_negative<G: Rng + ?Sized>(anchor: usize, labels: &[usize], rng: &mut G) -> usize {
    let y = labels[anchor];
    let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != y).collect();
    others[rng.random_range(0..others.len())]
}

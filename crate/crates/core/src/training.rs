//! Unrolled training: the loss sums a per-iteration loss over `y^(0..T)`
//! with weights `λ_τ`, and gradients flow back through every refinement
//! iteration including the context path.

use std::collections::BTreeMap;
use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{minibatches, Batch, Dataset};
use crate::error::{CflError, Result};
use crate::graph::{FlopTag, Graph, NodeId};
use crate::model::{CflModel, Session};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::refine::{unroll, Mode, UnrollOptions};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on logits.
    #[default]
    CrossEntropy,
    /// Squared error against one-hot targets.
    SquaredError,
}

/// `λ_0 … λ_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(CflError::Config("loss weights need at least one entry".into()));
        }
        if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(CflError::Config("loss weights must be finite and nonnegative".into()));
        }
        if lambda.iter().all(|&l| l == 0.0) {
            return Err(CflError::Config("at least one loss weight must be positive".into()));
        }
        Ok(Self(lambda))
    }

    /// Supervision on `y^(T)` only.
    pub fn final_only(t: usize) -> Self {
        let mut v = vec![0.0; t + 1];
        v[t] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `T` implied by the weights.
    pub fn unroll(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<f64>> for LossWeights {
    type Error = CflError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LossWeights> for Vec<f64> {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CflError::Shape(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// `ℓ(y, y*)` for one output node.
pub fn loss_node<T: Real>(s: &mut Session<'_, T>, kind: LossKind, y: NodeId, labels: &[usize]) -> Result<NodeId> {
    let prev = s.graph.set_tag(FlopTag::Loss);
    let out = match kind {
        LossKind::CrossEntropy => s.graph.cross_entropy(y, labels),
        LossKind::SquaredError => {
            let classes = s.graph.value(y).dims2()?.1;
            one_hot(labels, classes)
                .and_then(|t| s.graph.constant(t))
                .and_then(|t| s.graph.squared_error(y, t))
        }
    };
    s.graph.set_tag(prev);
    out
}

/// `Σ_τ λ_τ ℓ(y^(τ), y*)` over the output nodes of one unroll. Terms with
/// `λ_τ = 0` are not recorded.
pub fn unrolled_loss<T: Real>(
    s: &mut Session<'_, T>,
    outputs: &[NodeId],
    labels: &[usize],
    weights: &LossWeights,
    kind: LossKind,
) -> Result<NodeId> {
    if outputs.len() != weights.0.len() {
        return Err(CflError::Length(format!(
            "{} outputs, {} loss weights",
            outputs.len(),
            weights.0.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&y, &lambda) in outputs.iter().zip(&weights.0) {
        if lambda == 0.0 {
            continue;
        }
        let l = loss_node(s, kind, y, labels)?;
        let prev = s.graph.set_tag(FlopTag::Loss);
        let term = if lambda == 1.0 { Ok(l) } else { s.graph.scale(l, lambda) };
        let acc = term.and_then(|t| match total {
            None => Ok(t),
            Some(acc) => s.graph.add(acc, t),
        });
        s.graph.set_tag(prev);
        total = Some(acc?);
    }
    Ok(total.expect("weights validated to have a positive entry"))
}

/// Value-level `Σ_τ λ_τ ℓ(y^(τ), y*)` for already computed outputs.
pub fn trace_loss(outputs: &[Tensor<f64>], labels: &[usize], weights: &LossWeights, kind: LossKind) -> Result<f64> {
    if outputs.len() != weights.0.len() {
        return Err(CflError::Length(format!(
            "{} outputs, {} loss weights",
            outputs.len(),
            weights.0.len()
        )));
    }
    let store = ParamStore::new();
    let mut s: Session<'_, f64> = Session::new(&store, Graph::inference());
    let mut total = 0.0;
    for (y, &lambda) in outputs.iter().zip(&weights.0) {
        if lambda == 0.0 {
            continue;
        }
        let yn = s.graph.constant(y.clone())?;
        let l = loss_node(&mut s, kind, yn, labels)?;
        total += lambda * s.graph.value(l).item()?;
    }
    Ok(total)
}

/// Unrolls every input of `batch` in one graph and returns the mean loss
/// and the per-input output nodes.
pub fn batch_loss<T: Real>(
    model: &CflModel,
    s: &mut Session<'_, T>,
    batch: &Batch,
    weights: &LossWeights,
    kind: LossKind,
    mode: Mode,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    let opts = UnrollOptions {
        t_max: weights.unroll(),
        mode,
        ..Default::default()
    };
    let labels = batch.labels();
    let inputs = batch.inputs();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut total: Option<NodeId> = None;
    for (i, x) in inputs.into_iter().enumerate() {
        let u = unroll(model, s, x, &opts)?;
        let lab = if matches!(batch, Batch::Dense { .. }) {
            labels
        } else {
            &labels[i..i + 1]
        };
        let l = unrolled_loss(s, &u.outputs, lab, weights, kind)?;
        outputs.push(u.outputs);
        let prev = s.graph.set_tag(FlopTag::Loss);
        let acc = match total {
            None => Ok(l),
            Some(acc) => s.graph.add(acc, l),
        };
        s.graph.set_tag(prev);
        total = Some(acc?);
    }
    let mut loss = total.ok_or_else(|| CflError::Length("empty batch".into()))?;
    if outputs.len() > 1 {
        let prev = s.graph.set_tag(FlopTag::Loss);
        let scaled = s.graph.scale(loss, 1.0 / outputs.len() as f64);
        s.graph.set_tag(prev);
        loss = scaled?;
    }
    Ok((loss, outputs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerSpec {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(CflError::Config(format!("learning rate {lr} must be finite and nonnegative")));
        }
        if let OptimizerSpec::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(CflError::Config("adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        Self {
            spec,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update to every parameter allowed by `mask`. Parameters
    /// absent from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor<f64>>, mask: &[bool]) {
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !mask[id.index()] {
                continue;
            }
            let i = id.index();
            match self.spec {
                OptimizerSpec::Sgd { lr } => {
                    if lr == 0.0 {
                        continue;
                    }
                    if let Some(g) = grads.get(&id) {
                        for (p, g) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * g;
                        }
                    }
                }
                OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                    if lr == 0.0 {
                        continue;
                    }
                    let bc1 = 1.0 - beta1.powi(self.step);
                    let bc2 = 1.0 - beta2.powi(self.step);
                    let g = grads.get(&id);
                    let p = params.get_mut(id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.map_or(0.0, |g| g.data()[j]);
                        self.m[i][j] = beta1 * self.m[i][j] + (1.0 - beta1) * gj;
                        self.v[i][j] = beta2 * self.v[i][j] + (1.0 - beta2) * gj * gj;
                        let mh = self.m[i][j] / bc1;
                        let vh = self.v[i][j] / bc2;
                        p[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    32
}
fn default_t_eval() -> Vec<usize> {
    vec![0, 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub t_unroll: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub freeze_projector_basis: bool,
    #[serde(default = "default_true")]
    pub freeze_merged_base: bool,
    #[serde(default)]
    pub loss: LossKind,
    /// `λ_0 … λ_T`; final-iteration supervision when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    /// Depths evaluated in the log.
    #[serde(default = "default_t_eval")]
    pub t_eval: Vec<usize>,
}

impl TrainConfig {
    pub fn new(t_unroll: usize, epochs: usize, seed: u64) -> Self {
        Self {
            t_unroll,
            mode: Mode::Composed,
            optimizer: OptimizerSpec::default(),
            batch_size: default_batch(),
            epochs,
            seed,
            freeze_projector_basis: true,
            freeze_merged_base: true,
            loss: LossKind::CrossEntropy,
            loss_weights: None,
            t_eval: vec![t_unroll],
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.loss_weights.clone().unwrap_or_else(|| LossWeights::final_only(self.t_unroll))
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(CflError::Config("batch_size must be positive".into()));
        }
        if let Some(w) = &self.loss_weights {
            if w.unroll() != self.t_unroll {
                return Err(CflError::Config(format!(
                    "{} loss weights for t_unroll = {}",
                    w.0.len(),
                    self.t_unroll
                )));
            }
        }
        Ok(())
    }

    /// Which parameters the optimizer may update.
    pub fn trainable_mask(&self, params: &ParamStore) -> Vec<bool> {
        params
            .iter()
            .map(|(_, e)| match e.role {
                ParamRole::Regular => true,
                ParamRole::ProjectorBasis => !self.freeze_projector_basis,
                ParamRole::MergedBase => !self.freeze_merged_base,
            })
            .collect()
    }
}

/// Hex SHA-256 of the model and training configuration.
pub fn config_hash(model: &CflModel, cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(&model.spec, cfg)).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub t: usize,
    pub variant: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<LogRow>,
    pub steps: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# seed={} config_hash={}", self.seed, self.config_hash)?;
        writeln!(w, "epoch,split,loss,accuracy,T,variant")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy, r.t, r.variant)?;
        }
        Ok(())
    }

    pub fn rows_for(&self, split: &str, t: usize) -> impl Iterator<Item = &LogRow> + '_ {
        let split = split.to_string();
        self.rows.iter().filter(move |r| r.split == split && r.t == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss of `y^(T)` and accuracy over a dataset.
pub fn evaluate(model: &CflModel, data: &Dataset, t: usize, mode: Mode, kind: LossKind) -> Result<Evaluation> {
    evaluate_with::<f64>(model, data, t, mode, kind)
}

/// [`evaluate`] with the forward pass run in precision `T`.
pub fn evaluate_with<T: Real>(model: &CflModel, data: &Dataset, t: usize, mode: Mode, kind: LossKind) -> Result<Evaluation> {
    const CHUNK: usize = 256;
    let weights = LossWeights::final_only(t);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = data.batch(chunk)?;
        let mut s = model.inference_session::<T>();
        let (loss, outs) = batch_loss(model, &mut s, &batch, &weights, kind, mode)?;
        loss_sum += s.graph.value(loss).item()?.as_f64() * chunk.len() as f64;
        let labels = batch.labels();
        let mut k = 0;
        for o in outs {
            let y = s.graph.value(o[t]);
            let (_, c) = y.dims2()?;
            for row in y.data().chunks(c) {
                if argmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()) == labels[k] {
                    correct += 1;
                }
                k += 1;
            }
        }
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

fn as_diverged(e: CflError, epoch: usize, step: usize) -> CflError {
    match e {
        CflError::NonFinite(_) => CflError::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains in place. Epoch 0 in the log is the model before any update.
pub fn train(model: &mut CflModel, train_set: &Dataset, eval_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CflError::Config("training set is empty".into()));
    }
    let weights = cfg.weights();
    let mask = cfg.trainable_mask(&model.params);
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let variant = model.adapters.variant().name().to_string();
    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: config_hash(model, cfg),
        rows: Vec::new(),
        steps: 0,
    };
    let record = |model: &CflModel, log: &mut TrainLog, epoch: usize| -> Result<()> {
        let splits = std::iter::once(("train", train_set)).chain(eval_set.map(|e| ("eval", e)));
        for (name, ds) in splits {
            for &t in &cfg.t_eval {
                let e = evaluate(model, ds, t, cfg.mode, cfg.loss)?;
                log.rows.push(LogRow {
                    epoch,
                    split: name.to_string(),
                    loss: e.loss,
                    accuracy: e.accuracy,
                    t,
                    variant: variant.clone(),
                });
            }
        }
        Ok(())
    };
    record(model, &mut log, 0)?;
    for epoch in 1..=cfg.epochs {
        for idx in minibatches(train_set.len(), cfg.batch_size, &mut rng) {
            let batch = train_set.batch(&idx)?;
            let grads = {
                let mut s = Session::with_mask(&model.params, Graph::new(), mask.clone());
                let (loss, _) = batch_loss(model, &mut s, &batch, &weights, cfg.loss, cfg.mode)
                    .map_err(|e| as_diverged(e, epoch, log.steps))?;
                let lv: f64 = s.graph.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(CflError::Diverged {
                        epoch,
                        step: log.steps,
                        loss: lv,
                    });
                }
                let g = s.graph.backward(loss)?;
                g.params().map(|(id, t)| (id, t.clone())).collect::<BTreeMap<_, _>>()
            };
            opt.step(&mut model.params, &grads, &mask);
            log.steps += 1;
        }
        record(model, &mut log, epoch)?;
    }
    Ok(log)
}

/// Loss gradients for one batch, keyed by parameter. Parameters not reached
/// by the loss are absent.
pub fn gradients(
    model: &CflModel,
    batch: &Batch,
    weights: &LossWeights,
    kind: LossKind,
    mode: Mode,
    mask: &[bool],
) -> Result<(f64, BTreeMap<ParamId, Tensor<f64>>)> {
    let mut s = Session::with_mask(&model.params, Graph::new(), mask.to_vec());
    let (loss, _) = batch_loss(model, &mut s, batch, weights, kind, mode)?;
    let lv = s.graph.value(loss).item()?;
    let g = s.graph.backward(loss)?;
    Ok((lv, g.params().map(|(id, t)| (id, t.clone())).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backward gradients of the unrolled loss against central
/// differences over every trainable scalar.
pub fn grad_check(model: &CflModel, batch: &Batch, weights: &LossWeights, kind: LossKind, mode: Mode) -> Result<GradCheck> {
    const LIMIT: usize = 5_000;
    let mask: Vec<bool> = model.params.iter().map(|(_, e)| e.trainable()).collect();
    let n: usize = model.params.iter().filter(|(_, e)| e.trainable()).map(|(_, e)| e.value.len()).sum();
    if n > LIMIT {
        return Err(CflError::Config(format!("{n} trainable scalars exceed the grad-check limit of {LIMIT}")));
    }
    let (_, analytic) = gradients(model, batch, weights, kind, mode, &mask)?;
    let mut probe = model.clone();
    let value = |m: &CflModel| -> Result<f64> {
        let mut s = m.inference_session::<f64>();
        let (loss, _) = batch_loss(m, &mut s, batch, weights, kind, mode)?;
        s.graph.value(loss).item()
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = model.params.ids().filter(|id| mask[id.index()]).collect();
    for id in ids {
        for j in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = value(&probe)?;
            probe.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = value(&probe)?;
            probe.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[j]);
            let err = relative_error(a, numeric);
            if out.worst.is_none() || err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = Some((model.params.entry(id).name.clone(), j));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

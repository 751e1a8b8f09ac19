//! The bilevel loop.
//!
//! Inner step `t`: if the transform adapts during the inner loop,
//! `ξ_{t+1} = ξ_t − α∇_ξ ℓ(θ_t)` first, then
//! `θ_{t+1} = θ_t − α·U_{ξ_{t+1}}(∇_θ ℓ(θ_t))` on unfrozen tensors.
//! With the identity transform this is plain MAML. Outer gradients flow
//! through every inner step, including the ξ updates.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientRequest, Graph, NodeId};
use crate::error::{Error, Result};
use crate::metaopt::{init_xi, MetaOptimizer, OptimizerKind, OptimizerSpec};
use crate::models::{build_model, Model, ModelKind, ModelSpec};
use crate::record::{ExperimentRecord, MetricRow, Phase};
use crate::rng;
use crate::tasks::{TaskData, TaskDistribution};
use crate::tensor::Tensor;

pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub first_order: bool,
}

impl InnerConfig {
    pub fn new(alpha: f64, steps: usize) -> Self {
        InnerConfig {
            alpha,
            steps,
            first_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("inner steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterRule {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub beta: f64,
    pub meta_batch: usize,
    pub iterations: usize,
    pub rule: OuterRule,
    /// Meta-train the transform parameters (otherwise only the model).
    #[serde(default = "yes")]
    pub train_xi: bool,
}

fn yes() -> bool {
    true
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.meta_batch == 0 {
            return Err(Error::config("meta_batch must be at least 1"));
        }
        Ok(())
    }
}

/// State of one adaptation. Every vector has `steps + 1` entries, the
/// first describing the initialization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub params: Vec<Vec<Tensor>>,
    pub support_loss: Vec<f64>,
    pub query_loss: Vec<f64>,
    pub query_accuracy: Vec<Option<f64>>,
}

impl AdaptationTrace {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
}

fn is_regression(model: &Model) -> bool {
    matches!(model.spec.kind, ModelKind::Shallow1d | ModelKind::Deep1d)
}

/// Product of all weights of a 1D model, as `[1, 1]` or broadcast to `[n]`.
fn population_weight(g: &mut Graph, params: &[NodeId], batch: Option<usize>) -> Result<NodeId> {
    let mut w: Option<NodeId> = None;
    for &p in params {
        let p = match batch {
            Some(n) if g.shape(p) != [n] => g.broadcast_scalar(p, &[n])?,
            _ => p,
        };
        w = Some(match w {
            None => p,
            Some(acc) => g.mul(acc, p)?,
        });
    }
    w.ok_or_else(|| Error::contract("model without parameters"))
}

/// Scalar loss node of `split` and, for classification samples, the
/// logits node used for accuracy.
pub fn split_loss(
    g: &mut Graph,
    model: &Model,
    params: &[NodeId],
    data: &TaskData,
    split: Split,
) -> Result<(NodeId, Option<NodeId>)> {
    match data {
        TaskData::Samples(ds) => {
            let (x, y) = match split {
                Split::Support => (&ds.support_x, &ds.support_y),
                Split::Query => (&ds.query_x, &ds.query_y),
            };
            let xn = g.constant(x.clone());
            let out = model.forward_nodes(g, params, xn)?;
            if is_regression(model) {
                let yn = g.constant(y.clone());
                let m = g.mse(out, yn)?;
                Ok((g.scale(m, 0.5)?, None))
            } else if model.spec.output_dim == 1 {
                Ok((g.sigmoid_cross_entropy(out, y)?, Some(out)))
            } else {
                Ok((g.softmax_cross_entropy(out, y)?, Some(out)))
            }
        }
        TaskData::Population { theta } => {
            if !is_regression(model) {
                return Err(Error::config("population losses need a 1D regression model"));
            }
            let w = population_weight(g, params, None)?;
            let d = g.add_scalar(w, -theta)?;
            let sq = g.square(d)?;
            let l = g.sum(sq)?;
            let l = g.add_scalar(l, 1.0)?;
            Ok((g.scale(l, 0.5)?, None))
        }
        TaskData::PopulationBatch { thetas } => {
            if !is_regression(model) {
                return Err(Error::config("population losses need a 1D regression model"));
            }
            let n = thetas.numel();
            let w = population_weight(g, params, Some(n))?;
            let th = g.constant(thetas.clone());
            let d = g.sub(w, th)?;
            let sq = g.square(d)?;
            let sq = g.add_scalar(sq, 1.0)?;
            let sq = g.scale(sq, 0.5)?;
            // Summing keeps each task's inner gradient its own.
            let l = match split {
                Split::Support => g.sum(sq)?,
                Split::Query => g.mean(sq)?,
            };
            Ok((l, None))
        }
    }
}

/// Fraction of correctly classified rows of `logits` against `labels`.
pub fn accuracy(logits: &Tensor, labels: &Tensor) -> f64 {
    let k = logits.cols();
    let n = logits.rows();
    let mut correct = 0usize;
    for (z, y) in logits.data().chunks(k).zip(labels.data().chunks(k)) {
        let ok = if k == 1 {
            (z[0] > 0.0) == (y[0] > 0.5)
        } else {
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0
            };
            argmax(z) == argmax(y)
        };
        correct += usize::from(ok);
    }
    correct as f64 / n as f64
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

pub fn check_compatible(model: &Model, opt: Option<&MetaOptimizer>, data: &TaskData) -> Result<()> {
    if let Some(opt) = opt {
        opt.check_model(model)?;
        if matches!(data, TaskData::PopulationBatch { .. }) && opt.spec.kind != OptimizerKind::Identity {
            return Err(Error::config(
                "batched population tasks support the identity transform only",
            ));
        }
    }
    Ok(())
}

/// Inner loop in `g` from parameter nodes `params` and transform nodes
/// `xi`. Returns the adapted parameter and transform nodes and the support
/// loss before each step. With `differentiable` and not `first_order`, the
/// returned nodes carry the full second-order dependence on the inputs.
/// `opt = None` is the transform-free reference path.
#[allow(clippy::too_many_arguments)]
pub fn adapt_in(
    g: &mut Graph,
    model: &Model,
    opt: Option<&MetaOptimizer>,
    params: &[NodeId],
    xi: &[NodeId],
    data: &TaskData,
    cfg: &InnerConfig,
    differentiable: bool,
) -> Result<(Vec<NodeId>, Vec<NodeId>, Vec<f64>)> {
    cfg.validate()?;
    check_compatible(model, opt, data)?;
    let frozen = model.flat_freeze();
    let keep_graph = differentiable && !cfg.first_order;
    let mut theta: Vec<NodeId> = match data {
        TaskData::PopulationBatch { thetas } => params
            .iter()
            .map(|&p| g.broadcast_scalar(p, &[thetas.numel()]))
            .collect::<Result<_>>()?,
        _ => params.to_vec(),
    };
    let mut xi = xi.to_vec();
    let adapts_xi = opt.is_some_and(|o| o.spec.xi_adapts_inner);
    let mut losses = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (loss, _) = split_loss(g, model, &theta, data, Split::Support)?;
        let lv = g.scalar_value(loss)?;
        check_finite(t, lv)?;
        losses.push(lv);

        let trainable: Vec<usize> = (0..theta.len()).filter(|&i| !frozen[i]).collect();
        let mut wrt: Vec<NodeId> = trainable.iter().map(|&i| theta[i]).collect();
        if adapts_xi {
            wrt.extend(&xi);
        }
        let grads = g.grad(&GradientRequest::new(loss, wrt).create_graph(keep_graph))?;
        let (g_theta, g_xi) = grads.split_at(trainable.len());
        if adapts_xi {
            xi = xi
                .iter()
                .zip(g_xi)
                .map(|(&x, &gx)| {
                    let step = g.scale(gx, cfg.alpha)?;
                    g.sub(x, step)
                })
                .collect::<Result<_>>()?;
        }
        let mut full: Vec<NodeId> = Vec::with_capacity(theta.len());
        let mut k = 0;
        for i in 0..theta.len() {
            if frozen[i] {
                let shape = g.shape(theta[i]).to_vec();
                full.push(g.constant(Tensor::zeros(&shape)));
            } else {
                full.push(g_theta[k]);
                k += 1;
            }
        }
        let updates = match opt {
            Some(o) => o.transform_nodes(g, &xi, &full)?,
            None => full,
        };
        for &i in &trainable {
            let step = g.scale(updates[i], cfg.alpha)?;
            theta[i] = g.sub(theta[i], step)?;
        }
    }
    Ok((theta, xi, losses))
}

/// Non-differentiable adaptation of concrete parameters, recording the
/// full trace. Each step runs in a fresh graph.
pub fn adapt(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    data: &TaskData,
    cfg: &InnerConfig,
) -> Result<(Model, Option<MetaOptimizer>, AdaptationTrace)> {
    cfg.validate()?;
    if matches!(data, TaskData::PopulationBatch { .. }) {
        return Err(Error::config("adapt works on single tasks; use adapt_in for batches"));
    }
    let step_cfg = InnerConfig {
        steps: 1,
        ..cfg.clone()
    };
    if opt.is_some_and(|o| o.spec.xi_adapts_inner) {
        return adapt_linked(model, opt, data, &step_cfg, cfg.steps);
    }
    let mut cur = model.clone();
    let mut cur_opt = opt.cloned();
    let mut trace = AdaptationTrace::default();
    for t in 0..=cfg.steps {
        let mut g = Graph::new();
        let params = cur.bind(&mut g);
        let xi = cur_opt.as_ref().map(|o| o.bind(&mut g)).unwrap_or_default();
        let (sl, _) = split_loss(&mut g, &cur, &params, data, Split::Support)?;
        let (ql, logits) = split_loss(&mut g, &cur, &params, data, Split::Query)?;
        trace.params.push(cur.flat_params());
        trace.support_loss.push(g.scalar_value(sl)?);
        trace.query_loss.push(g.scalar_value(ql)?);
        trace.query_accuracy.push(match (logits, data) {
            (Some(z), TaskData::Samples(ds)) => Some(accuracy(g.evaluate(z)?, &ds.query_y)),
            _ => None,
        });
        if t == cfg.steps {
            break;
        }
        let (np, nx, _) =
            adapt_in(&mut g, &cur, cur_opt.as_ref(), &params, &xi, data, &step_cfg, false).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { step: t, loss },
                other => other,
            })?;
        let vals = np
            .iter()
            .map(|&n| Ok(g.evaluate(n)?.clone()))
            .collect::<Result<Vec<_>>>()?;
        cur = cur.with_flat_params(vals)?;
        if let Some(o) = &cur_opt {
            let xv = nx
                .iter()
                .map(|&n| Ok(g.evaluate(n)?.clone()))
                .collect::<Result<Vec<_>>>()?;
            cur_opt = Some(o.with_flat_params(xv)?);
        }
    }
    Ok((cur, cur_opt, trace))
}

/// [`adapt`] for transforms that take inner ξ steps: ∇_ξ ℓ(θ_t) needs θ_t
/// to stay a function of ξ, so all steps share one graph.
fn adapt_linked(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    data: &TaskData,
    step_cfg: &InnerConfig,
    steps: usize,
) -> Result<(Model, Option<MetaOptimizer>, AdaptationTrace)> {
    let mut g = Graph::new();
    let mut theta = model.bind(&mut g);
    let mut xi = opt.map(|o| o.bind(&mut g)).unwrap_or_default();
    let mut trace = AdaptationTrace::default();
    let values = |g: &mut Graph, nodes: &[NodeId]| {
        nodes
            .iter()
            .map(|&n| Ok(g.evaluate(n)?.clone()))
            .collect::<Result<Vec<_>>>()
    };
    for t in 0..=steps {
        let (sl, _) = split_loss(&mut g, model, &theta, data, Split::Support)?;
        let (ql, logits) = split_loss(&mut g, model, &theta, data, Split::Query)?;
        trace.params.push(values(&mut g, &theta)?);
        trace.support_loss.push(g.scalar_value(sl)?);
        trace.query_loss.push(g.scalar_value(ql)?);
        trace.query_accuracy.push(match (logits, data) {
            (Some(z), TaskData::Samples(ds)) => Some(accuracy(g.evaluate(z)?, &ds.query_y)),
            _ => None,
        });
        if t == steps {
            break;
        }
        let (np, nx, _) = adapt_in(&mut g, model, opt, &theta, &xi, data, step_cfg, false).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { step: t, loss },
            other => other,
        })?;
        theta = np;
        xi = nx;
    }
    let cur = model.with_flat_params(values(&mut g, &theta)?)?;
    let cur_opt = match opt {
        Some(o) => Some(o.with_flat_params(values(&mut g, &xi)?)?),
        None => None,
    };
    Ok((cur, cur_opt, trace))
}

/// Post-adaptation population loss of every task in `thetas`, one graph
/// for the whole batch.
pub fn population_task_losses(model: &Model, thetas: &Tensor, cfg: &InnerConfig) -> Result<Vec<f64>> {
    let data = TaskData::PopulationBatch { thetas: thetas.clone() };
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let (theta, _, _) = adapt_in(&mut g, model, None, &params, &[], &data, cfg, false)?;
    let w = population_weight(&mut g, &theta, Some(thetas.numel()))?;
    let w = g.evaluate(w)?;
    Ok(w.data()
        .iter()
        .zip(thetas.data())
        .map(|(w, t)| 0.5 * ((w - t) * (w - t) + 1.0))
        .collect())
}

/// Mean post-adaptation query loss over `tasks`, differentiable with
/// respect to `params` and `xi`.
#[allow(clippy::too_many_arguments)]
pub fn maml_meta_loss_in(
    g: &mut Graph,
    model: &Model,
    opt: Option<&MetaOptimizer>,
    params: &[NodeId],
    xi: &[NodeId],
    tasks: &[TaskData],
    cfg: &InnerConfig,
) -> Result<NodeId> {
    if tasks.is_empty() {
        return Err(Error::contract("meta-loss needs at least one task"));
    }
    let mut total: Option<NodeId> = None;
    for data in tasks {
        let (theta, _, _) = adapt_in(g, model, opt, params, xi, data, cfg, true)?;
        let (ql, _) = split_loss(g, model, &theta, data, Split::Query)?;
        total = Some(match total {
            None => ql,
            Some(t) => g.add(t, ql)?,
        });
    }
    g.scale(total.unwrap(), 1.0 / tasks.len() as f64)
}

/// Value and gradients of the meta-loss at concrete parameters.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub loss: f64,
    pub model_grads: Vec<Tensor>,
    pub xi_grads: Vec<Tensor>,
}

fn task_meta_gradient(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    data: &TaskData,
    cfg: &InnerConfig,
) -> Result<MetaGradient> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let xi = opt.map(|o| o.bind(&mut g)).unwrap_or_default();
    let loss = maml_meta_loss_in(&mut g, model, opt, &params, &xi, std::slice::from_ref(data), cfg)?;
    let lv = g.scalar_value(loss)?;
    let mut wrt = params.clone();
    wrt.extend(&xi);
    let grads = g.grad(&GradientRequest::new(loss, wrt))?;
    let vals = grads
        .iter()
        .map(|&n| Ok(g.evaluate(n)?.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (mg, xg) = vals.split_at(params.len());
    Ok(MetaGradient {
        loss: lv,
        model_grads: mg.to_vec(),
        xi_grads: xg.to_vec(),
    })
}

/// Meta-gradient averaged over tasks. Tasks are processed in parallel on
/// separate graphs and summed in task order.
pub fn meta_gradient(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    tasks: &[TaskData],
    cfg: &InnerConfig,
) -> Result<MetaGradient> {
    if tasks.is_empty() {
        return Err(Error::contract("meta-gradient needs at least one task"));
    }
    let per_task: Vec<MetaGradient> = tasks
        .par_iter()
        .map(|d| task_meta_gradient(model, opt, d, cfg))
        .collect::<Result<_>>()?;
    let scale = 1.0 / tasks.len() as f64;
    let mut acc = per_task[0].clone();
    for m in &per_task[1..] {
        acc.loss += m.loss;
        for (a, b) in acc.model_grads.iter_mut().zip(&m.model_grads) {
            *a = a.add(b)?;
        }
        for (a, b) in acc.xi_grads.iter_mut().zip(&m.xi_grads) {
            *a = a.add(b)?;
        }
    }
    acc.loss *= scale;
    acc.model_grads = acc.model_grads.iter().map(|t| t.scale(scale)).collect();
    acc.xi_grads = acc.xi_grads.iter().map(|t| t.scale(scale)).collect();
    Ok(acc)
}

/// Optimizer state for the outer update.
#[derive(Clone, Debug, Default)]
pub struct OuterState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const MOMENTUM: f64 = 0.9;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OuterState {
    pub fn apply(&mut self, rule: OuterRule, beta: f64, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, gr)) in params.iter().zip(grads).enumerate() {
            let next = match rule {
                OuterRule::Sgd => p.sub(&gr.scale(beta))?,
                OuterRule::SgdMomentum => {
                    self.m[i] = self.m[i].scale(MOMENTUM).add(gr)?;
                    p.sub(&self.m[i].scale(beta))?
                }
                OuterRule::Adam => {
                    self.m[i] = self.m[i].zip_with(gr, "adam", |m, g| ADAM_B1 * m + (1.0 - ADAM_B1) * g)?;
                    self.v[i] = self.v[i].zip_with(gr, "adam", |v, g| ADAM_B2 * v + (1.0 - ADAM_B2) * g * g)?;
                    let c1 = 1.0 - ADAM_B1.powi(t);
                    let c2 = 1.0 - ADAM_B2.powi(t);
                    let step = self.m[i].zip_with(&self.v[i], "adam", |m, v| {
                        beta * (m / c1) / ((v / c2).sqrt() + ADAM_EPS)
                    })?;
                    p.sub(&step)?
                }
            };
            out.push(next);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub meta_loss: f64,
    pub grad_norm: f64,
}

/// One outer update of the model initialization and, when
/// `outer.train_xi`, of the transform initialization.
pub fn meta_step(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    tasks: &[TaskData],
    inner: &InnerConfig,
    outer: &OuterConfig,
    state: &mut OuterState,
    iteration: usize,
) -> Result<(Model, Option<MetaOptimizer>, StepMetrics)> {
    let mg = meta_gradient(model, opt, tasks, inner)?;
    check_finite(iteration, mg.loss)?;
    let mut params = model.flat_params();
    let n_model = params.len();
    let mut grads = mg.model_grads.clone();
    if outer.train_xi {
        if let Some(o) = opt {
            params.extend(o.flat_params());
            grads.extend(mg.xi_grads.iter().cloned());
        }
    }
    let grad_norm = grads
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let mut next = state.apply(outer.rule, outer.beta, &params, &grads)?;
    let xi_part = next.split_off(n_model);
    let new_model = model.with_flat_params(next)?;
    let new_opt = match opt {
        Some(o) if outer.train_xi => Some(o.with_flat_params(xi_part)?),
        other => other.cloned(),
    };
    Ok((
        new_model,
        new_opt,
        StepMetrics {
            meta_loss: mg.loss,
            grad_norm,
        },
    ))
}

/// Everything that determines one meta-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBundle {
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub tasks: TaskDistribution,
    pub inner: InnerConfig,
    /// Adaptation used at meta-test time; defaults to `inner`.
    #[serde(default)]
    pub eval_inner: Option<InnerConfig>,
    pub outer: OuterConfig,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    /// Evaluate every this many iterations (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    /// Batch population tasks into one graph per meta-step.
    #[serde(default)]
    pub batched_population: bool,
    /// Record a parameter snapshot every this many iterations.
    #[serde(default = "default_trajectory_every")]
    pub trajectory_every: usize,
}

fn default_eval_tasks() -> usize {
    100
}

fn default_trajectory_every() -> usize {
    10
}

impl TrainBundle {
    pub fn validate(&self) -> Result<()> {
        self.model.validated()?;
        self.optimizer.validate()?;
        self.tasks.validate()?;
        self.inner.validate()?;
        if let Some(e) = &self.eval_inner {
            e.validate()?;
        }
        self.outer.validate()?;
        if self.batched_population && !self.tasks.population {
            return Err(Error::config("batched_population needs a population task distribution"));
        }
        Ok(())
    }

    pub fn eval_cfg(&self) -> &InnerConfig {
        self.eval_inner.as_ref().unwrap_or(&self.inner)
    }
}

const TRAIN_SALT: u64 = 0x0074_7261_696e;
const EVAL_SALT: u64 = 0x6576_616c;

/// Base seed of the held-out meta-test tasks of a run.
pub fn eval_base(seed: u64) -> u64 {
    rng::mix(seed, EVAL_SALT)
}

pub fn train_base(seed: u64) -> u64 {
    rng::mix(seed, TRAIN_SALT)
}

/// Meta-test tasks `0..count` of the family.
pub fn eval_task_set(dist: &TaskDistribution, seed: u64, count: usize) -> Result<Vec<TaskData>> {
    let base = eval_base(seed);
    (0..count as u64).map(|i| Ok(dist.episode(base, i)?.1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub pre_mean_accuracy: Option<f64>,
    /// Tasks whose adaptation diverged. They count with accuracy 0 and
    /// are left out of the loss statistics.
    #[serde(default)]
    pub diverged: usize,
    pub accuracies: Vec<f64>,
    pub losses: Vec<f64>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Adapts to every task and summarizes post-adaptation query metrics.
pub fn evaluate(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    tasks: &[TaskData],
    cfg: &InnerConfig,
) -> Result<EvalSummary> {
    let traces: Vec<Option<AdaptationTrace>> = tasks
        .par_iter()
        .map(|d| match adapt(model, opt, d, cfg) {
            Ok(r) => Ok(Some(r.2)),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let classify = !matches!(model.spec.kind, ModelKind::Shallow1d | ModelKind::Deep1d);
    let diverged = traces.iter().filter(|t| t.is_none()).count();
    let done: Vec<&AdaptationTrace> = traces.iter().flatten().collect();
    let losses: Vec<f64> = done.iter().map(|t| *t.query_loss.last().unwrap()).collect();
    let accs: Vec<f64> = traces
        .iter()
        .filter_map(|t| match t {
            Some(t) => *t.query_accuracy.last().unwrap(),
            None => classify.then_some(0.0),
        })
        .collect();
    let pre: Vec<f64> = done.iter().filter_map(|t| t.query_accuracy[0]).collect();
    let (ml, sl) = mean_std(&losses);
    let (ma, sa) = if accs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    };
    Ok(EvalSummary {
        tasks: tasks.len(),
        mean_loss: ml,
        std_loss: sl,
        mean_accuracy: ma,
        std_accuracy: sa,
        pre_mean_accuracy: (!pre.is_empty()).then(|| mean_std(&pre).0),
        diverged,
        accuracies: accs,
        losses,
    })
}

fn training_tasks(bundle: &TrainBundle, base: u64, iteration: usize) -> Result<Vec<TaskData>> {
    let mb = bundle.outer.meta_batch;
    let start = (iteration * mb) as u64;
    let episodes = (start..start + mb as u64)
        .map(|i| Ok(bundle.tasks.episode(base, i)?.1))
        .collect::<Result<Vec<_>>>()?;
    if bundle.batched_population {
        let thetas = episodes
            .iter()
            .map(|d| match d {
                TaskData::Population { theta } => Ok(*theta),
                _ => Err(Error::config("batched_population needs population tasks")),
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(vec![TaskData::PopulationBatch {
            thetas: Tensor::vector(thetas),
        }]);
    }
    Ok(episodes)
}

/// Runs `outer.iterations` meta-steps from the seeded initialization.
/// Divergence stops the run and is recorded; everything else propagates.
pub fn meta_train(bundle: &TrainBundle, seed: u64) -> Result<ExperimentRecord> {
    bundle.validate()?;
    let model = build_model(&bundle.model, seed)?;
    let opt = match bundle.optimizer.kind {
        OptimizerKind::Identity => None,
        _ => Some(init_xi(&bundle.optimizer, &model)?),
    };
    meta_train_from(bundle, seed, model, opt)
}

pub fn meta_train_from(
    bundle: &TrainBundle,
    seed: u64,
    mut model: Model,
    mut opt: Option<MetaOptimizer>,
) -> Result<ExperimentRecord> {
    bundle.validate()?;
    let started = Instant::now();
    let base = train_base(seed);
    let eval_set = eval_task_set(&bundle.tasks, seed, bundle.eval_tasks)?;
    let mut record = ExperimentRecord::new(seed);
    let mut state = OuterState::default();
    let snapshot = |m: &Model| -> Vec<f64> { m.flat_params().iter().flat_map(|t| t.data().to_vec()).collect() };
    let track = model.param_count() <= 2;
    if track {
        record.trajectory.push((0, snapshot(&model)));
    }
    let eval_row = |record: &mut ExperimentRecord, it: usize, m: &Model, o: Option<&MetaOptimizer>| -> Result<()> {
        let s = evaluate(m, o, &eval_set, bundle.eval_cfg())?;
        record.metrics.push(MetricRow {
            seed,
            iteration: it,
            phase: Phase::MetaTest,
            step: bundle.eval_cfg().steps,
            loss: s.mean_loss,
            accuracy: s.mean_accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
            ..MetricRow::default()
        });
        record.final_eval = Some(s);
        Ok(())
    };
    for it in 0..bundle.outer.iterations {
        let tasks = training_tasks(bundle, base, it)?;
        match meta_step(
            &model,
            opt.as_ref(),
            &tasks,
            &bundle.inner,
            &bundle.outer,
            &mut state,
            it,
        ) {
            Ok((m, o, metrics)) => {
                model = m;
                opt = o;
                record.metrics.push(MetricRow {
                    seed,
                    iteration: it,
                    phase: Phase::MetaTrain,
                    step: bundle.inner.steps,
                    loss: metrics.meta_loss,
                    accuracy: None,
                    wall_ms: started.elapsed().as_millis() as u64,
                    ..MetricRow::default()
                });
                record.iterations_completed = it + 1;
                if track && (it + 1) % bundle.trajectory_every.max(1) == 0 {
                    record.trajectory.push((it + 1, snapshot(&model)));
                }
            }
            Err(Error::Divergence { step, loss }) => {
                record.divergence = Some(crate::record::Divergence {
                    iteration: it,
                    inner_step: step,
                    loss,
                });
                break;
            }
            Err(e) => return Err(e),
        }
        if bundle.eval_every > 0 && (it + 1) % bundle.eval_every == 0 && it + 1 < bundle.outer.iterations {
            eval_row(&mut record, it + 1, &model, opt.as_ref())?;
        }
    }
    if record.divergence.is_none() {
        let done = record.iterations_completed;
        eval_row(&mut record, done, &model, opt.as_ref())?;
    }
    record.final_model = Some(model);
    record.final_xi = opt;
    Ok(record)
}

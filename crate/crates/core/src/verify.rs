//! Property suites shared by the `verify` command and the test targets.
//!
//! Each suite returns a [`SuiteReport`]; a suite fails on the first
//! violated property and names it.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{central_difference, relative_error, CustomOp, GradientRequest, Graph, NodeId};
use crate::error::Result;
use crate::maml::{adapt, adapt_in, maml_meta_loss_in, split_loss, InnerConfig, Split};
use crate::metaopt::{init_xi, matrix_view, MetaOptimizer, OptimizerSpec, XiActivation, XiEntry};
use crate::models::{build_model, Model, ModelSpec};
use crate::oracle::{self, DeepPoint};
use crate::rng::{self, Stream};
use crate::tasks::{LabelMode, TaskData, TaskDistribution};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Free-form values worth reporting (e.g. Hessian eigenvalues).
    #[serde(default)]
    pub notes: Vec<(String, f64)>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.into(),
            passed: true,
            checks: vec![],
            notes: vec![],
        }
    }

    /// Records `value <= tolerance`.
    fn at_most(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        let passed = value <= tolerance;
        self.passed &= passed;
        self.checks.push(Check {
            name: name.into(),
            passed,
            value,
            tolerance,
        });
    }

    fn holds(&mut self, name: impl Into<String>, ok: bool) {
        self.at_most(name, if ok { 0.0 } else { 1.0 }, 0.0);
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }
}

// ---- autodiff -----------------------------------------------------------

/// `tanh` with a graph-level pullback, used to exercise user-defined
/// second derivatives. The corrupted variant hides the dependence of its
/// pullback on the input, so first derivatives stay right and second
/// derivatives go wrong.
#[derive(Debug)]
pub struct GraphTanh {
    pub corrupt_second_order: bool,
}

impl CustomOp for GraphTanh {
    fn name(&self) -> &str {
        "graph_tanh"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        Ok(inputs[0].to_vec())
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(f64::tanh))
    }

    fn vjp(&self, _inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(output.map(|t| 1.0 - t * t).mul(upstream)?)])
    }

    fn vjp_graph(
        &self,
        g: &mut Graph,
        _inputs: &[NodeId],
        output: NodeId,
        upstream: NodeId,
    ) -> Option<Result<Vec<Option<NodeId>>>> {
        let build = |g: &mut Graph| -> Result<Vec<Option<NodeId>>> {
            let d = if self.corrupt_second_order {
                let v = g.evaluate(output)?.map(|t| 1.0 - t * t);
                g.constant(v)
            } else {
                let t2 = g.square(output)?;
                let n = g.neg(t2)?;
                g.add_scalar(n, 1.0)?
            };
            Ok(vec![Some(g.mul(upstream, d)?)])
        };
        Some(build(g))
    }
}

type UnaryBuilder = fn(&mut Graph, NodeId) -> Result<NodeId>;

fn unary_ops() -> Vec<(&'static str, UnaryBuilder, bool)> {
    // (name, builder, needs positive inputs)
    vec![
        ("neg", |g, x| g.neg(x), false),
        ("scale", |g, x| g.scale(x, -1.7), false),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3), false),
        ("square", |g, x| g.square(x), false),
        ("sigmoid", |g, x| g.sigmoid(x), false),
        ("tanh", |g, x| g.tanh(x), false),
        ("exp", |g, x| g.exp(x), false),
        ("log", |g, x| g.log(x), true),
        ("relu", |g, x| g.relu(x), false),
        ("transpose", |g, x| g.transpose(x), false),
        ("reshape", |g, x| g.reshape(x, &[2, 3]), false),
        ("vec", |g, x| g.vec(x), false),
        ("sum_rows", |g, x| g.sum_rows(x), false),
        ("row_sum", |g, x| g.row_sum(x), false),
        ("softmax", |g, x| g.softmax(x), false),
        ("mean", |g, x| g.mean(x), false),
        ("sum", |g, x| g.sum(x), false),
        ("slice_rows", |g, x| g.slice_rows(x, 1, 2), false),
        ("pad_rows", |g, x| g.pad_rows(x, 1, 5), false),
        (
            "concat",
            |g, x| {
                let s = g.square(x)?;
                g.concat(&[x, s])
            },
            false,
        ),
        (
            "broadcast_rows",
            |g, x| {
                let r = g.sum_rows(x)?;
                g.broadcast_rows(r, 4)
            },
            false,
        ),
        (
            "broadcast_cols",
            |g, x| {
                let r = g.row_sum(x)?;
                g.broadcast_cols(r, 2)
            },
            false,
        ),
        (
            "broadcast_scalar",
            |g, x| {
                let s = g.mean(x)?;
                g.broadcast_scalar(s, &[2, 2])
            },
            false,
        ),
        (
            "mul",
            |g, x| {
                let t = g.tanh(x)?;
                g.mul(x, t)
            },
            false,
        ),
        (
            "div",
            |g, x| {
                let e = g.exp(x)?;
                let d = g.add_scalar(e, 1.0)?;
                g.div(x, d)
            },
            false,
        ),
        (
            "sub",
            |g, x| {
                let s = g.square(x)?;
                g.sub(x, s)
            },
            false,
        ),
        (
            "add",
            |g, x| {
                let s = g.sigmoid(x)?;
                g.add(x, s)
            },
            false,
        ),
        (
            "mul_scalar",
            |g, x| {
                let s = g.mean(x)?;
                g.mul_scalar(s, x)
            },
            false,
        ),
        (
            "matmul",
            |g, x| {
                let t = g.transpose(x)?;
                g.matmul(x, t)
            },
            false,
        ),
        (
            "mse",
            |g, x| {
                let s = g.tanh(x)?;
                g.mse(x, s)
            },
            false,
        ),
        (
            "softmax_cross_entropy",
            |g, x| {
                let labels = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.3, 0.7]).unwrap();
                g.softmax_cross_entropy(x, &labels)
            },
            false,
        ),
        (
            "sigmoid_cross_entropy",
            |g, x| {
                let labels = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
                g.sigmoid_cross_entropy(x, &labels)
            },
            false,
        ),
        (
            "graph_tanh",
            |g, x| {
                g.custom(
                    Arc::new(GraphTanh {
                        corrupt_second_order: false,
                    }),
                    &[x],
                )
            },
            false,
        ),
    ]
}

/// Random but fixed reduction of an op's output to a scalar, so every
/// output coordinate influences the check.
fn reduce(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let mut r = rng::stream(seed, Stream::Perturb, 0);
    let w = g.constant(rng::normal_tensor(&mut r, &shape, 1.0));
    let p = g.mul(y, w)?;
    let s = g.sum(p)?;
    // a smooth nonlinearity makes the second-order check see the rule
    let sq = g.square(s)?;
    let q = g.scale(sq, 0.5)?;
    g.add(q, s)
}

fn op_input(seed: u64, positive: bool) -> Tensor {
    let mut r = rng::stream(seed, Stream::Perturb, 1);
    let mut t = rng::normal_tensor(&mut r, &[3, 2], 1.0);
    if positive {
        t = t.map(|v| v.abs() + 0.5);
    } else {
        // keep clear of the relu kink
        t = t.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    }
    t
}

/// Gradient-of-gradient check: the Hessian-vector product from nested
/// reverse mode against central differences of the first-order gradient.
fn second_order_error(build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>, x: &Tensor, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, Stream::Perturb, 2);
    let dir = rng::normal_tensor(&mut r, x.shape(), 1.0);
    let grad_dot = |pt: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.param(pt.clone());
        let y = build(&mut g, p)?;
        let gp = g.grad(&GradientRequest::new(y, vec![p]))?[0];
        Ok(g.evaluate(gp)?.mul(&dir)?.sum())
    };
    let numeric = central_difference(grad_dot, x, 1e-5)?;
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let y = build(&mut g, p)?;
    let gp = g.grad(&GradientRequest::new(y, vec![p]).create_graph(true))?[0];
    let d = g.constant(dir.clone());
    let gd = g.mul(gp, d)?;
    let s = g.sum(gd)?;
    let hv = g.grad(&GradientRequest::new(s, vec![p]))?[0];
    let analytic = g.evaluate(hv)?.clone();
    relative_error(&analytic, &numeric)
}

fn first_order_error(build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>, x: &Tensor) -> Result<f64> {
    let value = |pt: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.param(pt.clone());
        let y = build(&mut g, p)?;
        g.scalar_value(y)
    };
    let numeric = central_difference(value, x, 1e-5)?;
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let y = build(&mut g, p)?;
    let gp = g.grad(&GradientRequest::new(y, vec![p]))?[0];
    relative_error(g.evaluate(gp)?, &numeric)
}

/// Finite-difference agreement of first and second derivatives for every
/// op, plus linearity, Hessian symmetry and determinism.
pub fn autodiff_suite(corrupt_second_order: bool) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("autodiff-fd");
    let mut ops = unary_ops();
    if corrupt_second_order {
        ops.push((
            "graph_tanh_corrupted",
            |g, x| {
                g.custom(
                    Arc::new(GraphTanh {
                        corrupt_second_order: true,
                    }),
                    &[x],
                )
            },
            false,
        ));
    }
    for (k, (name, op, positive)) in ops.iter().enumerate() {
        for trial in 0..3u64 {
            let seed = 1000 * k as u64 + trial;
            let x = op_input(seed, *positive);
            let build = |g: &mut Graph, p: NodeId| -> Result<NodeId> {
                let y = op(g, p)?;
                reduce(g, y, seed)
            };
            let e1 = first_order_error(&build, &x)?;
            rep.at_most(format!("{name}: first derivative (trial {trial})"), e1, 1e-4);
            if *name != "relu" {
                let e2 = second_order_error(&build, &x, seed)?;
                rep.at_most(format!("{name}: second derivative (trial {trial})"), e2, 1e-4);
            }
        }
    }

    // linearity of grad over random small graphs
    let mut worst_lin: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    for trial in 0..20u64 {
        let mut r = rng::stream(trial, Stream::Perturb, 9);
        let x = rng::normal_tensor(&mut r, &[3], 1.0);
        let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
        let f = |g: &mut Graph, p: NodeId| -> Result<NodeId> {
            let t = g.tanh(p)?;
            let s = g.mul(t, p)?;
            g.sum(s)
        };
        let h = |g: &mut Graph, p: NodeId| -> Result<NodeId> {
            let e = g.sigmoid(p)?;
            let q = g.square(e)?;
            let first = g_first(g, p)?;
            let m = g.mul_scalar(first, q)?;
            g.sum(m)
        };
        let mut g = Graph::new();
        let p = g.param(x.clone());
        let fv = f(&mut g, p)?;
        let hv = h(&mut g, p)?;
        let fa = g.scale(fv, a)?;
        let hb = g.scale(hv, b)?;
        let comb = g.add(fa, hb)?;
        let gc = g.grad(&GradientRequest::new(comb, vec![p]))?[0];
        let gf = g.grad(&GradientRequest::new(fv, vec![p]))?[0];
        let gh = g.grad(&GradientRequest::new(hv, vec![p]))?[0];
        let lhs = g.evaluate(gc)?.clone();
        let rhs = g.evaluate(gf)?.scale(a).add(&g.evaluate(gh)?.scale(b))?;
        worst_lin = worst_lin.max(lhs.max_abs_diff(&rhs)?);

        let hess = crate::autodiff::hessian(
            |g, p| {
                let a = f(g, p)?;
                let b = h(g, p)?;
                let ab = g.mul(a, b)?;
                g.add(ab, a)
            },
            &x,
        )?;
        let ht = hess.transpose()?;
        worst_sym = worst_sym.max(hess.max_abs_diff(&ht)?);
    }
    rep.at_most("grad linearity", worst_lin, 1e-12);
    rep.at_most("hessian symmetry", worst_sym, 1e-8);

    // determinism
    let run = || -> Result<Tensor> {
        let model = build_model(&ModelSpec::linnet(2, vec![4], 1), 5)?;
        let dist = TaskDistribution::logistic2d(LabelMode::Hard);
        let data = dist.episode(3, 0)?.1;
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let l = maml_meta_loss_in(&mut g, &model, None, &params, &[], &[data], &InnerConfig::new(0.5, 2))?;
        let gr = g.grad(&GradientRequest::new(l, params.clone()))?[0];
        Ok(g.evaluate(gr)?.clone())
    };
    let (r1, r2) = (run()?, run()?);
    rep.holds(
        "determinism",
        r1.data().iter().zip(r2.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
    );
    Ok(rep)
}

fn g_first(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let s = g.slice_rows(p, 0, 1)?;
    g.sum(s)
}

// ---- meta-gradients -----------------------------------------------------

/// Unrolled meta-loss at concrete parameters.
pub fn meta_loss_value(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    tasks: &[TaskData],
    cfg: &InnerConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for d in tasks {
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let xi = opt.map(|o| o.bind(&mut g)).unwrap_or_default();
        let (theta, _, _) = adapt_in(&mut g, model, opt, &params, &xi, d, cfg, false)?;
        let (ql, _) = split_loss(&mut g, model, &theta, d, Split::Query)?;
        total += g.scalar_value(ql)?;
    }
    Ok(total / tasks.len() as f64)
}

fn flatten(ts: &[Tensor]) -> Tensor {
    Tensor::vector(ts.iter().flat_map(|t| t.data().to_vec()).collect())
}

fn unflatten(flat: &Tensor, like: &[Tensor]) -> Vec<Tensor> {
    let mut k = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), flat.data()[k..k + n].to_vec()).unwrap();
            k += n;
            out
        })
        .collect()
}

/// Max relative error between the reverse-mode meta-gradient (model and
/// transform parameters) and extrapolated central differences of the
/// unrolled loss.
pub fn meta_gradient_error(
    model: &Model,
    opt: Option<&MetaOptimizer>,
    tasks: &[TaskData],
    cfg: &InnerConfig,
    step: f64,
) -> Result<f64> {
    let mg = crate::maml::meta_gradient(model, opt, tasks, cfg)?;
    let mut analytic = mg.model_grads.clone();
    analytic.extend(mg.xi_grads.iter().cloned());
    let mp = model.flat_params();
    let xp = opt.map(|o| o.flat_params()).unwrap_or_default();
    let mut all = mp.clone();
    all.extend(xp.iter().cloned());
    let point = flatten(&all);
    let eval = |v: &Tensor| -> Result<f64> {
        let parts = unflatten(v, &all);
        let (m, x) = parts.split_at(mp.len());
        let model = model.with_flat_params(m.to_vec())?;
        let o = match opt {
            Some(o) => Some(o.with_flat_params(x.to_vec())?),
            None => None,
        };
        meta_loss_value(&model, o.as_ref(), tasks, cfg)
    };
    // Richardson extrapolation of two central differences: O(h⁴)
    let coarse = central_difference(eval, &point, step)?;
    let fine = central_difference(eval, &point, step / 2.0)?;
    let numeric = fine.scale(4.0 / 3.0).sub(&coarse.scale(1.0 / 3.0))?;
    relative_error(&flatten(&analytic), &numeric)
}

/// Perturbs identity-initialized ξ so that transform gradients are generic.
/// Noise is scaled by each tensor's magnitude.
pub fn jitter_xi(opt: &MetaOptimizer, seed: u64, scale: f64) -> Result<MetaOptimizer> {
    let mut r = rng::stream(seed, Stream::Perturb, 3);
    let next = opt
        .flat_params()
        .iter()
        .map(|t| {
            let size = if t.max_abs() > 0.0 { t.max_abs() } else { 1.0 };
            t.add(&rng::normal_tensor(&mut r, t.shape(), scale * size))
        })
        .collect::<Result<Vec<_>>>()?;
    opt.with_flat_params(next)
}

pub struct MetaGradCase {
    pub label: String,
    pub model: Model,
    pub opt: Option<MetaOptimizer>,
    pub tasks: Vec<TaskData>,
    pub cfg: InnerConfig,
}

/// The model/transform/step-count grid of the meta-gradient suite.
pub fn meta_gradient_cases() -> Result<Vec<MetaGradCase>> {
    let mut cases = Vec::new();
    let logistic_dist = TaskDistribution {
        shots: 3,
        query: 4,
        ..TaskDistribution::logistic2d(LabelMode::Hard)
    };
    let regression_dist = TaskDistribution {
        population: false,
        shots: 4,
        query: 4,
        ..TaskDistribution::regression_population()
    };
    let mut logistic_no_bias = build_model(&ModelSpec::logistic(2, 1), 11)?;
    logistic_no_bias.layers[0].bias = None;
    let models: Vec<(&str, Model, TaskDistribution, f64)> = vec![
        (
            "shallow1d",
            build_model(&ModelSpec::shallow1d(), 1)?,
            regression_dist.clone(),
            0.3,
        ),
        (
            "deep1d",
            build_model(&ModelSpec::deep1d(), 2)?,
            regression_dist.clone(),
            0.1,
        ),
        ("logistic", logistic_no_bias, logistic_dist.clone(), 0.5),
        (
            "linnet2",
            build_model(&ModelSpec::linnet(2, vec![3, 2], 1), 4)?,
            logistic_dist,
            0.3,
        ),
    ];
    let specs: Vec<OptimizerSpec> = vec![
        OptimizerSpec::identity(),
        OptimizerSpec::msgd(),
        OptimizerSpec::mc(),
        OptimizerSpec::kfo(0),
        OptimizerSpec::kfo(1),
        OptimizerSpec::kfo(2),
        // the ε-scaled tanh stack amplifies ξ gradients by 1/ε, so it is
        // checked without inner-loop ξ updates
        OptimizerSpec {
            activation: XiActivation::Tanh,
            xi_adapts_inner: false,
            ..OptimizerSpec::kfo(1)
        },
    ];
    for (name, model, dist, alpha) in &models {
        let tasks = vec![dist.episode(21, 0)?.1, dist.episode(21, 1)?.1];
        for steps in [1usize, 3, 5] {
            for spec in &specs {
                let opt = match spec.kind {
                    crate::metaopt::OptimizerKind::Identity => None,
                    _ => Some(jitter_xi(&init_xi(spec, model)?, steps as u64, 0.05)?),
                };
                let opt_name = match spec.kind {
                    crate::metaopt::OptimizerKind::Kfo => {
                        format!("kfo{} {:?}", spec.depth, spec.activation).to_lowercase()
                    }
                    k => format!("{k:?}").to_lowercase(),
                };
                cases.push(MetaGradCase {
                    label: format!("{name} T={steps} {opt_name}"),
                    model: model.clone(),
                    opt,
                    tasks: tasks.clone(),
                    cfg: InnerConfig::new(*alpha, steps),
                });
            }
        }
    }
    Ok(cases)
}

/// Step of the coarse difference in the meta-gradient check.
pub const META_FD_STEP: f64 = 3e-5;

pub fn meta_gradient_suite() -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("meta-gradient-fd");
    for case in meta_gradient_cases()? {
        let e = meta_gradient_error(&case.model, case.opt.as_ref(), &case.tasks, &case.cfg, META_FD_STEP)?;
        rep.at_most(case.label, e, 1e-4);
    }
    Ok(rep)
}

// ---- transforms ---------------------------------------------------------

fn random_matrix(r: &mut rand_chacha::ChaCha8Rng, n: usize, m: usize) -> Tensor {
    rng::normal_tensor(r, &[n, m], 1.0)
}

/// `vec(L·G·R) + b` against the materialized `(Rᵀ ⊗ L)·vec(G) + b`.
pub fn kron_dense_error(instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, Stream::Perturb, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(1..=6);
        let m = r.random_range(1..=6);
        let l = random_matrix(&mut r, n, n);
        let rr = random_matrix(&mut r, m, m);
        let b = rng::normal_tensor(&mut r, &[n * m], 1.0);
        let gm = random_matrix(&mut r, n, m);
        let opt = MetaOptimizer {
            spec: OptimizerSpec::kfo(0),
            xi: crate::metaopt::XiParams {
                entries: vec![XiEntry::Kron {
                    l: l.clone(),
                    r: rr.clone(),
                    b: Some(b.clone()),
                }],
            },
        };
        let u = opt.transform(std::slice::from_ref(&gm))?.remove(0);
        let dense = rr.transpose()?.kron(&l)?;
        let vg = gm.vec_col_major()?;
        let expect = dense.matmul(&vg.reshape(&[n * m, 1])?)?.reshape(&[n * m])?.add(&b)?;
        worst = worst.max(u.vec_col_major()?.max_abs_diff(&expect)?);
    }
    Ok(worst)
}

/// KFO with diagonal factors and no bias against Meta-SGD with
/// `d = l·rᵀ`.
pub fn diagonal_reduction_error(instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, Stream::Perturb, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(1..=6);
        let m = r.random_range(1..=6);
        let lv: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
        let rv: Vec<f64> = (0..m).map(|_| rng::normal(&mut r)).collect();
        let mut l = vec![0.0; n * n];
        let mut rr = vec![0.0; m * m];
        for i in 0..n {
            l[i * n + i] = lv[i];
        }
        for j in 0..m {
            rr[j * m + j] = rv[j];
        }
        let mut d = Vec::with_capacity(n * m);
        for li in &lv {
            d.extend(rv.iter().map(|rj| li * rj));
        }
        let gm = random_matrix(&mut r, n, m);
        let kfo = MetaOptimizer {
            spec: OptimizerSpec::kfo(0),
            xi: crate::metaopt::XiParams {
                entries: vec![XiEntry::Kron {
                    l: Tensor::matrix(n, n, l)?,
                    r: Tensor::matrix(m, m, rr)?,
                    b: Some(Tensor::zeros(&[n * m])),
                }],
            },
        };
        let msgd = MetaOptimizer {
            spec: OptimizerSpec::msgd(),
            xi: crate::metaopt::XiParams {
                entries: vec![XiEntry::Diagonal {
                    d: Tensor::matrix(n, m, d)?,
                }],
            },
        };
        let a = kfo.transform(std::slice::from_ref(&gm))?.remove(0);
        let b = msgd.transform(std::slice::from_ref(&gm))?.remove(0);
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(worst)
}

fn bits_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.shape() == y.shape() && x.data() == y.data())
}

/// Whether identity-initialized transforms reproduce the transform-free
/// adaptation trajectory exactly over `steps` inner steps.
pub fn identity_trajectory_matches(spec: &OptimizerSpec, steps: usize) -> Result<bool> {
    let model = build_model(&ModelSpec::linnet(2, vec![4, 3], 1), 17)?;
    let dist = TaskDistribution::logistic2d(LabelMode::Hard);
    let data = dist.episode(5, 0)?.1;
    let cfg = InnerConfig::new(0.3, steps);
    let spec = OptimizerSpec {
        xi_adapts_inner: false,
        ..spec.clone()
    };
    let opt = init_xi(&spec, &model)?;
    let (_, _, plain) = adapt(&model, None, &data, &cfg)?;
    let (_, _, with) = adapt(&model, Some(&opt), &data, &cfg)?;
    Ok(plain.params.iter().zip(&with.params).all(|(a, b)| bits_equal(a, b)))
}

/// Transform algebra: Kronecker/dense equivalence, reduction chain,
/// identity initialization, memory bound.
pub fn transform_suite() -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("kfo-algebra");
    rep.at_most("kron vs dense (200 instances)", kron_dense_error(200, 1)?, 1e-12);
    rep.at_most("diagonal kfo vs meta-sgd", diagonal_reduction_error(200, 2)?, 1e-12);

    // Meta-SGD with d = c·1 is gradient descent with step α·c.
    let model = build_model(&ModelSpec::linnet(2, vec![3], 1), 3)?;
    let dist = TaskDistribution::logistic2d(LabelMode::Hard);
    let data = dist.episode(9, 0)?.1;
    let c = 0.5;
    let mut msgd = init_xi(&OptimizerSpec::msgd(), &model)?;
    msgd = msgd.with_flat_params(
        msgd.flat_params()
            .iter()
            .map(|t| Tensor::filled(t.shape(), c))
            .collect(),
    )?;
    let (a, _, _) = adapt(&model, Some(&msgd), &data, &InnerConfig::new(0.8, 3))?;
    let (b, _, _) = adapt(&model, None, &data, &InnerConfig::new(0.8 * c, 3))?;
    let diff = a
        .flat_params()
        .iter()
        .zip(b.flat_params())
        .map(|(x, y)| x.max_abs_diff(&y))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    rep.at_most("meta-sgd d=c·1 vs gd with step α·c", diff, 1e-12);

    for spec in [
        OptimizerSpec::msgd(),
        OptimizerSpec::mc(),
        OptimizerSpec::kfo(0),
        OptimizerSpec::kfo(2),
    ] {
        let name = format!(
            "identity init {:?}(depth {}) bit-for-bit over 100 steps",
            spec.kind, spec.depth
        );
        rep.holds(name, identity_trajectory_matches(&spec, 100)?);
    }

    // identity at init on random gradients
    for spec in [
        OptimizerSpec::msgd(),
        OptimizerSpec::mc(),
        OptimizerSpec::kfo(0),
        OptimizerSpec::kfo(3),
    ] {
        let m = build_model(&ModelSpec::linnet(3, vec![4], 2), 8)?;
        let opt = init_xi(&spec, &m)?;
        let mut r = rng::stream(4, Stream::Perturb, 6);
        let grads: Vec<Tensor> = m
            .flat_params()
            .iter()
            .map(|t| rng::normal_tensor(&mut r, t.shape(), 1.0))
            .collect();
        let u = opt.transform(&grads)?;
        rep.holds(
            format!("U(g) = g at init for {:?}(depth {})", spec.kind, spec.depth),
            bits_equal(&u, &grads),
        );
    }

    // memory bound n² + m² + nm < (nm)²
    let mut ok = true;
    for n in 2..=6 {
        for m in 2..=6 {
            let model = build_model(&ModelSpec::logistic(m, n), 0)?;
            let opt = init_xi(&OptimizerSpec::kfo(0), &model)?;
            let (rows, cols) = matrix_view(model.layers[0].weight.shape());
            let count = opt.xi.entries[0].param_count();
            ok &= count == rows * rows + cols * cols + rows * cols && count < (rows * cols).pow(2);
        }
    }
    rep.holds("kron parameter count n²+m²+nm < (nm)²", ok);
    Ok(rep)
}

// ---- oracle -------------------------------------------------------------

/// Probabilists' Gauss-Hermite rule with 5 nodes: exact for polynomials
/// in `θ ~ N(0, 1)` up to degree 9.
pub fn gauss_hermite5() -> [(f64, f64); 5] {
    let s10 = 10f64.sqrt();
    let nodes = [
        0.0,
        (5.0 - s10).sqrt(),
        -(5.0 - s10).sqrt(),
        (5.0 + s10).sqrt(),
        -(5.0 + s10).sqrt(),
    ];
    nodes.map(|x| {
        let he4 = x.powi(4) - 6.0 * x * x + 3.0;
        (x, 120.0 / (25.0 * he4 * he4))
    })
}

/// Exact expectation over tasks of the engine's post-adaptation
/// population loss of `deep1d` at `p`.
pub fn engine_deep_population_loss(p: DeepPoint, alpha: f64) -> Result<(f64, (f64, f64))> {
    let mut model = build_model(&ModelSpec::deep1d(), 0)?;
    model.layers[0].weight = Tensor::matrix(1, 1, vec![p.a])?;
    model.layers[1].weight = Tensor::matrix(1, 1, vec![p.b])?;
    let cfg = InnerConfig::new(alpha, 1);
    let mut loss = 0.0;
    let (mut ga, mut gb) = (0.0, 0.0);
    for (theta, w) in gauss_hermite5() {
        let mg = crate::maml::meta_gradient(&model, None, &[TaskData::Population { theta }], &cfg)?;
        loss += w * mg.loss;
        ga += w * mg.model_grads[0].data()[0];
        gb += w * mg.model_grads[1].data()[0];
    }
    Ok((loss, (ga, gb)))
}

/// Nested-reverse-mode Hessian of the deep objective built in the graph.
pub fn autodiff_deep_hessian(p: DeepPoint, alpha: f64) -> Result<[[f64; 2]; 2]> {
    let h = crate::autodiff::hessian(
        |g, x| {
            let a = g.slice_rows(x, 0, 1)?;
            let b = g.slice_rows(x, 1, 1)?;
            deep_objective_nodes(g, a, b, alpha)
        },
        &Tensor::vector(vec![p.a, p.b]),
    )?;
    Ok([[h.at2(0, 0), h.at2(0, 1)], [h.at2(1, 0), h.at2(1, 1)]])
}

/// `p1² + p2² + 3p3² + 2p1p3 − 2p2` from one-element nodes `a`, `b`.
pub fn deep_objective_nodes(g: &mut Graph, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId> {
    let ab = g.mul(a, b)?;
    let a2 = g.square(a)?;
    let b2 = g.square(b)?;
    let s = g.add(a2, b2)?;
    let sab = g.mul(s, ab)?;
    let ab2 = g.square(ab)?;
    let ab3 = g.mul(ab2, ab)?;
    let t1 = g.scale(sab, -alpha)?;
    let t2 = g.scale(ab3, alpha * alpha)?;
    let p1 = g.add(ab, t1)?;
    let p1 = g.add(p1, t2)?;
    let u1 = g.scale(s, alpha)?;
    let u2 = g.scale(ab2, -2.0 * alpha * alpha)?;
    let p2 = g.add(u1, u2)?;
    let p3 = g.scale(ab, alpha * alpha)?;
    let p1s = g.square(p1)?;
    let p2s = g.square(p2)?;
    let p3s = g.square(p3)?;
    let p3s = g.scale(p3s, 3.0)?;
    let p13 = g.mul(p1, p3)?;
    let p13 = g.scale(p13, 2.0)?;
    let m2 = g.scale(p2, -2.0)?;
    let l = g.add(p1s, p2s)?;
    let l = g.add(l, p3s)?;
    let l = g.add(l, p13)?;
    let l = g.add(l, m2)?;
    g.sum(l)
}

/// Stationary structure, derivative cross-checks and engine agreement.
pub fn oracle_suite(alpha: f64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("oracle");
    let pts = oracle::stationary_points(alpha)?;
    rep.holds("five stationary points", pts.len() == 5);
    for sp in &pts {
        let (da, db) = oracle::deep_maml_grad(sp.coords, alpha);
        let tag = format!("({:.5}, {:.5})", sp.coords.a, sp.coords.b);
        rep.at_most(format!("gradient norm at {tag}"), da.hypot(db), 1e-12);
        let fd = oracle::deep_maml_hessian(sp.coords, alpha, 1e-5);
        let ad = autodiff_deep_hessian(sp.coords, alpha)?;
        let mut e_fd: f64 = 0.0;
        let mut e_ad: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                e_fd = e_fd.max((fd[i][j] - sp.hessian[i][j]).abs());
                e_ad = e_ad.max((ad[i][j] - sp.hessian[i][j]).abs());
            }
        }
        rep.at_most(format!("hessian by differences at {tag}"), e_fd, 1e-6);
        rep.at_most(format!("hessian by nested autodiff at {tag}"), e_ad, 1e-9);
        rep.at_most(format!("a·b at {tag}"), (sp.coords.a * sp.coords.b).abs(), 0.0);
        let [lo, hi] = sp.eigenvalues();
        rep.notes.push((format!("eigenvalues {tag} low"), lo));
        rep.notes.push((format!("eigenvalues {tag} high"), hi));
    }

    let mut r = rng::stream(77, Stream::Perturb, 7);
    let mut worst_fd: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    let mut worst_engine: f64 = 0.0;
    let mut worst_engine_grad: f64 = 0.0;
    for k in 0..100 {
        let p = DeepPoint::new(2.0 * rng::normal(&mut r), 2.0 * rng::normal(&mut r));
        let (da, db) = oracle::deep_maml_grad(p, alpha);
        let h = 1e-6;
        let fa = (oracle::deep_maml_objective(DeepPoint::new(p.a + h, p.b), alpha)
            - oracle::deep_maml_objective(DeepPoint::new(p.a - h, p.b), alpha))
            / (2.0 * h);
        let fb = (oracle::deep_maml_objective(DeepPoint::new(p.a, p.b + h), alpha)
            - oracle::deep_maml_objective(DeepPoint::new(p.a, p.b - h), alpha))
            / (2.0 * h);
        let scale = 1.0 + da.abs().max(db.abs());
        worst_fd = worst_fd.max((da - fa).abs().max((db - fb).abs()) / scale);
        let l = oracle::deep_maml_loss(p, alpha);
        worst_sym = worst_sym
            .max((l - oracle::deep_maml_loss(DeepPoint::new(p.b, p.a), alpha)).abs())
            .max((l - oracle::deep_maml_loss(DeepPoint::new(-p.a, -p.b), alpha)).abs());
        if k < 20 {
            let (el, (ga, gb)) = engine_deep_population_loss(p, alpha)?;
            worst_engine = worst_engine.max((el - (l + 0.5)).abs() / (1.0 + l.abs()));
            worst_engine_grad = worst_engine_grad.max(((2.0 * ga - da).abs().max((2.0 * gb - db).abs())) / scale);
        }
    }
    rep.at_most("gradient vs differences of the objective (100 points)", worst_fd, 1e-6);
    rep.at_most("loss symmetry", worst_sym, 1e-9);
    rep.at_most("engine population loss = closed form + 1/2", worst_engine, 1e-12);
    rep.at_most(
        "engine meta-gradient = closed-form gradient / 2",
        worst_engine_grad,
        1e-12,
    );
    Ok(rep)
}

/// Monte Carlo meta-loss of the engine against the closed form on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloAgreement {
    pub samples: usize,
    pub grid: usize,
    /// Fitted additive constant: inverse-variance weighted mean of engine
    /// minus closed form.
    pub offset: f64,
    /// Largest `|engine − closed form − offset|` over the grid.
    pub max_abs_deviation: f64,
    /// Largest deviation in units of the point's Monte Carlo standard error.
    pub max_standard_errors: f64,
    pub worst_point: (f64, f64),
}

/// Engine meta-loss of `deep1d` from `samples` task draws (shared across
/// grid points) at every cell of a `grid × grid` lattice over `[lo, hi]²`.
pub fn monte_carlo_agreement(
    alpha: f64,
    samples: usize,
    grid: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<MonteCarloAgreement> {
    const CHUNK: usize = 1 << 17;
    let mut r = rng::stream(seed, Stream::Task, 0);
    let thetas: Vec<Tensor> = (0..samples)
        .step_by(CHUNK)
        .map(|start| rng::normal_tensor(&mut r, &[CHUNK.min(samples - start)], 1.0))
        .collect();
    let cfg = InnerConfig::new(alpha, 1);
    let cells = oracle::deep_landscape(alpha, lo, hi, grid)?;
    let stats: Vec<(f64, f64, f64, f64)> = cells
        .par_iter()
        .map(|c| {
            let mut model = build_model(&ModelSpec::deep1d(), 0)?;
            model.layers[0].weight = Tensor::matrix(1, 1, vec![c.a])?;
            model.layers[1].weight = Tensor::matrix(1, 1, vec![c.b])?;
            let (mut s1, mut s2) = (0.0, 0.0);
            for t in &thetas {
                for l in crate::maml::population_task_losses(&model, t, &cfg)? {
                    s1 += l;
                    s2 += l * l;
                }
            }
            let n = samples as f64;
            let mean = s1 / n;
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
            Ok((c.a, c.b, mean - c.loss, (var / n).sqrt()))
        })
        .collect::<Result<_>>()?;
    // inverse-variance weighted fit of the constant
    let wsum: f64 = stats.iter().map(|s| 1.0 / (s.3 * s.3)).sum();
    let offset = stats.iter().map(|s| s.2 / (s.3 * s.3)).sum::<f64>() / wsum;
    let mut out = MonteCarloAgreement {
        samples,
        grid,
        offset,
        max_abs_deviation: 0.0,
        max_standard_errors: 0.0,
        worst_point: (0.0, 0.0),
    };
    for &(a, b, d, se) in &stats {
        let dev = (d - offset).abs();
        out.max_abs_deviation = out.max_abs_deviation.max(dev);
        let z = dev / se;
        if z > out.max_standard_errors {
            out.max_standard_errors = z;
            out.worst_point = (a, b);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub first_failure: Option<String>,
    pub suites: Vec<SuiteReport>,
}

/// Runs every suite. `corrupt_second_order` injects a broken custom op
/// into the autodiff suite as a negative control.
pub fn run_all(corrupt_second_order: bool, include_meta_gradients: bool) -> Result<VerifyReport> {
    let mut suites = vec![
        autodiff_suite(corrupt_second_order)?,
        transform_suite()?,
        oracle_suite(0.1)?,
    ];
    if include_meta_gradients {
        suites.push(meta_gradient_suite()?);
    }
    let first_failure = suites.iter().find_map(|s| {
        s.first_failure().map(|c| {
            format!(
                "{}: {} (value {:e}, tolerance {:e})",
                s.suite, c.name, c.value, c.tolerance
            )
        })
    });
    Ok(VerifyReport {
        passed: first_failure.is_none(),
        first_failure,
        suites,
    })
}

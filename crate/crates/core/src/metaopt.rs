//! Learnable gradient transforms `U_ξ`.
//!
//! One entry per model parameter tensor. A tensor is viewed as an `n × m`
//! matrix `G` (a weight `[out, in]` as is, a bias `[n]` as `n × 1`) and
//! the Kronecker entries compute `L·G·R + b`, where `b` holds `vec(·)` in
//! column-major order so that the update equals `(Rᵀ ⊗ L)·vec(G) + b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient: `U(g) = g`.
    Identity,
    /// Meta-SGD: per-coordinate scaling `d ⊙ g`.
    Msgd,
    /// Meta-Curvature: `L·G·R`, no bias, fixed during adaptation.
    Mc,
    /// Kronecker-factored optimizer: `L·G·R + b`, optionally stacked.
    Kfo,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiActivation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// Extra `(L, R)` pairs beyond the first (`kfo` only).
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub activation: XiActivation,
    /// Take a gradient step on ξ before every inner model step.
    #[serde(default)]
    pub xi_adapts_inner: bool,
}

impl OptimizerSpec {
    pub fn identity() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Identity,
            depth: 0,
            activation: XiActivation::Relu,
            xi_adapts_inner: false,
        }
    }

    pub fn msgd() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Msgd,
            ..OptimizerSpec::identity()
        }
    }

    pub fn mc() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Mc,
            ..OptimizerSpec::identity()
        }
    }

    pub fn kfo(depth: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Kfo,
            depth,
            activation: XiActivation::Relu,
            xi_adapts_inner: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            OptimizerKind::Identity | OptimizerKind::Msgd | OptimizerKind::Mc if self.depth != 0 => {
                Err(Error::config("depth applies to kfo only"))
            }
            OptimizerKind::Mc if self.xi_adapts_inner => Err(Error::config(
                "meta-curvature keeps its parameters fixed during adaptation",
            )),
            OptimizerKind::Identity if self.xi_adapts_inner => {
                Err(Error::config("the identity transform has no parameters to adapt"))
            }
            _ => Ok(()),
        }
    }
}

/// Transform parameters for one model parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum XiEntry {
    Identity,
    Diagonal {
        d: Tensor,
    },
    Kron {
        l: Tensor,
        r: Tensor,
        /// Column-major `vec` bias of length `n·m`.
        b: Option<Tensor>,
    },
    KronStack {
        /// `(L_i, R_i)` applied in order, activation between pairs.
        layers: Vec<(Tensor, Tensor)>,
        b: Tensor,
        activation: XiActivation,
    },
}

impl XiEntry {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            XiEntry::Identity => vec![],
            XiEntry::Diagonal { d } => vec![d],
            XiEntry::Kron { l, r, b } => {
                let mut v = vec![l, r];
                v.extend(b.iter());
                v
            }
            XiEntry::KronStack { layers, b, .. } => {
                let mut v: Vec<&Tensor> = layers.iter().flat_map(|(l, r)| [l, r]).collect();
                v.push(b);
                v
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            XiEntry::Identity => vec![],
            XiEntry::Diagonal { d } => vec![d],
            XiEntry::Kron { l, r, b } => {
                let mut v = vec![l, r];
                v.extend(b.iter_mut());
                v
            }
            XiEntry::KronStack { layers, b, .. } => {
                let mut v: Vec<&mut Tensor> = layers.iter_mut().flat_map(|(l, r)| [l, r]).collect();
                v.push(b);
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// The ξ of every parameter tensor of a model, in flat parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiParams {
    pub entries: Vec<XiEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaOptimizer {
    pub spec: OptimizerSpec,
    pub xi: XiParams,
}

/// `(n, m)` of the matrix view of a parameter tensor.
pub fn matrix_view(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

const TANH_SCALE: f64 = 1e-3;

fn stack_identity(n: usize, m: usize, depth: usize, activation: XiActivation) -> Vec<(Tensor, Tensor)> {
    let eye_m = Tensor::eye(m);
    let mut layers = Vec::with_capacity(depth + 1);
    match activation {
        XiActivation::Relu => {
            // [I; −I] splits G into its positive and negative parts, relu
            // keeps them, [I, −I] recombines.
            let mut split = vec![0.0; 2 * n * n];
            let mut merge = vec![0.0; 2 * n * n];
            for i in 0..n {
                split[i * n + i] = 1.0;
                split[(n + i) * n + i] = -1.0;
                merge[i * 2 * n + i] = 1.0;
                merge[i * 2 * n + n + i] = -1.0;
            }
            layers.push((Tensor::matrix(2 * n, n, split).unwrap(), eye_m.clone()));
            for _ in 1..depth {
                layers.push((Tensor::eye(2 * n), eye_m.clone()));
            }
            layers.push((Tensor::matrix(n, 2 * n, merge).unwrap(), eye_m));
        }
        XiActivation::Tanh => {
            layers.push((Tensor::eye(n).scale(TANH_SCALE), eye_m.clone()));
            for _ in 1..depth {
                layers.push((Tensor::eye(n), eye_m.clone()));
            }
            layers.push((Tensor::eye(n).scale(1.0 / TANH_SCALE), eye_m));
        }
    }
    layers
}

/// Identity-initialized transform for `model`. Stacked relu transforms are
/// exactly the identity; stacked tanh ones agree with it to `O(ε²)` with
/// `ε = 1e-3`.
pub fn init_xi(spec: &OptimizerSpec, model: &Model) -> Result<MetaOptimizer> {
    spec.validate()?;
    let entries = model
        .flat_params()
        .iter()
        .map(|p| {
            let (n, m) = matrix_view(p.shape());
            match spec.kind {
                OptimizerKind::Identity => XiEntry::Identity,
                OptimizerKind::Msgd => XiEntry::Diagonal {
                    d: Tensor::ones(p.shape()),
                },
                OptimizerKind::Mc => XiEntry::Kron {
                    l: Tensor::eye(n),
                    r: Tensor::eye(m),
                    b: None,
                },
                OptimizerKind::Kfo if spec.depth == 0 => XiEntry::Kron {
                    l: Tensor::eye(n),
                    r: Tensor::eye(m),
                    b: Some(Tensor::zeros(&[n * m])),
                },
                OptimizerKind::Kfo => XiEntry::KronStack {
                    layers: stack_identity(n, m, spec.depth, spec.activation),
                    b: Tensor::zeros(&[n * m]),
                    activation: spec.activation,
                },
            }
        })
        .collect();
    Ok(MetaOptimizer {
        spec: spec.clone(),
        xi: XiParams { entries },
    })
}

impl MetaOptimizer {
    pub fn param_count(&self) -> usize {
        self.xi.entries.iter().map(XiEntry::param_count).sum()
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        self.xi
            .entries
            .iter()
            .flat_map(|e| e.tensors().into_iter().cloned())
            .collect()
    }

    pub fn with_flat_params(&self, params: Vec<Tensor>) -> Result<MetaOptimizer> {
        let mut out = self.clone();
        let mut it = params.into_iter();
        for e in &mut out.xi.entries {
            for t in e.tensors_mut() {
                let v = it.next().ok_or_else(|| Error::contract("too few xi tensors"))?;
                if v.shape() != t.shape() {
                    return Err(Error::shape("xi", t.shape(), v.shape()));
                }
                *t = v;
            }
        }
        if it.next().is_some() {
            return Err(Error::contract("too many xi tensors"));
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.flat_params().into_iter().map(|t| g.param(t)).collect()
    }

    /// Checks that the entries fit the parameter shapes of `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let params = model.flat_params();
        if params.len() != self.xi.entries.len() {
            return Err(Error::config(format!(
                "meta-optimizer has {} entries for {} parameter tensors",
                self.xi.entries.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter().zip(&self.xi.entries) {
            let (n, m) = matrix_view(p.shape());
            let ok = match e {
                XiEntry::Identity => true,
                XiEntry::Diagonal { d } => d.shape() == p.shape(),
                XiEntry::Kron { l, r, b } => {
                    l.shape() == [n, n] && r.shape() == [m, m] && b.as_ref().is_none_or(|b| b.numel() == n * m)
                }
                XiEntry::KronStack { layers, b, .. } => {
                    b.numel() == n * m
                        && layers.first().is_some_and(|(l, _)| l.shape()[1] == n)
                        && layers.last().is_some_and(|(l, _)| l.shape()[0] == n)
                        && layers.iter().all(|(_, r)| r.shape() == [m, m])
                }
            };
            if !ok {
                return Err(Error::shape("xi entry", p.shape(), &[n, m]));
            }
        }
        Ok(())
    }

    /// Per-tensor updates `U_ξ(g)` built in `g`. `xi` are nodes holding
    /// [`MetaOptimizer::flat_params`], `grads` one node per parameter tensor.
    pub fn transform_nodes(&self, g: &mut Graph, xi: &[NodeId], grads: &[NodeId]) -> Result<Vec<NodeId>> {
        if grads.len() != self.xi.entries.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} xi entries",
                grads.len(),
                self.xi.entries.len()
            )));
        }
        let mut k = 0;
        let mut next = |count: usize| -> Result<&[NodeId]> {
            let s = xi
                .get(k..k + count)
                .ok_or_else(|| Error::contract("too few xi nodes"))?;
            k += count;
            Ok(s)
        };
        let mut out = Vec::with_capacity(grads.len());
        for (e, &gr) in self.xi.entries.iter().zip(grads) {
            let shape = g.shape(gr).to_vec();
            let (n, m) = matrix_view(&shape);
            let u = match e {
                XiEntry::Identity => gr,
                XiEntry::Diagonal { .. } => {
                    let d = next(1)?[0];
                    g.mul(d, gr)?
                }
                XiEntry::Kron { b, .. } => {
                    let nodes = next(2 + usize::from(b.is_some()))?.to_vec();
                    let gm = g.reshape(gr, &[n, m])?;
                    let lg = g.matmul(nodes[0], gm)?;
                    let mut u = g.matmul(lg, nodes[1])?;
                    if b.is_some() {
                        let bm = col_major_matrix(g, nodes[2], n, m)?;
                        u = g.add(u, bm)?;
                    }
                    g.reshape(u, &shape)?
                }
                XiEntry::KronStack { layers, activation, .. } => {
                    let nodes = next(2 * layers.len() + 1)?.to_vec();
                    let mut h = g.reshape(gr, &[n, m])?;
                    for i in 0..layers.len() {
                        if i > 0 {
                            h = match activation {
                                XiActivation::Relu => g.relu(h)?,
                                XiActivation::Tanh => g.tanh(h)?,
                            };
                        }
                        let lh = g.matmul(nodes[2 * i], h)?;
                        h = g.matmul(lh, nodes[2 * i + 1])?;
                    }
                    let bm = col_major_matrix(g, nodes[2 * layers.len()], n, m)?;
                    let u = g.add(h, bm)?;
                    g.reshape(u, &shape)?
                }
            };
            out.push(u);
        }
        if k != xi.len() {
            return Err(Error::contract("too many xi nodes"));
        }
        Ok(out)
    }

    /// Numeric convenience wrapper around [`MetaOptimizer::transform_nodes`].
    pub fn transform(&self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xi = self.bind(&mut g);
        let gn: Vec<NodeId> = grads.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.transform_nodes(&mut g, &xi, &gn)?;
        out.into_iter().map(|u| Ok(g.evaluate(u)?.clone())).collect()
    }

    /// One plain gradient step `ξ ← ξ − α·grad`.
    pub fn xi_inner_update(&self, grads: &[Tensor], alpha: f64) -> Result<MetaOptimizer> {
        if !self.spec.xi_adapts_inner {
            return Err(Error::contract(format!(
                "{:?} transforms are not updated during adaptation",
                self.spec.kind
            )));
        }
        let cur = self.flat_params();
        if cur.len() != grads.len() {
            return Err(Error::contract("gradient count differs from xi tensor count"));
        }
        let next = cur
            .iter()
            .zip(grads)
            .map(|(p, gr)| p.sub(&gr.scale(alpha)))
            .collect::<Result<Vec<_>>>()?;
        self.with_flat_params(next)
    }
}

/// Column-major vector of length `n·m` as an `n × m` matrix node.
fn col_major_matrix(g: &mut Graph, b: NodeId, n: usize, m: usize) -> Result<NodeId> {
    if m == 1 {
        return g.reshape(b, &[n, 1]);
    }
    let t = g.reshape(b, &[m, n])?;
    g.transpose(t)
}

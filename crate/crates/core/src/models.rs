//! Model zoo: 1D regressors, logistic regression, linear networks and MLPs.
//!
//! Every layer computes `h ← act(h·Wᵀ + b)` with `W` stored `[out, in]`.
//! The 1D models are stacks of `[1, 1]` weights without bias:
//! `shallow1d` has the single layer `c`, `deep1d` the layers `a` then
//! `b`, so `ŷ = b·a·x`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Shallow1d,
    Deep1d,
    Logistic,
    Linnet,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Shallow1d => "shallow1d",
            ModelKind::Deep1d => "deep1d",
            ModelKind::Logistic => "logistic",
            ModelKind::Linnet => "linnet",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "one")]
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Give the hidden layers of a linnet a bias.
    #[serde(default)]
    pub hidden_bias: bool,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn shallow1d() -> Self {
        ModelSpec {
            kind: ModelKind::Shallow1d,
            input_dim: 1,
            output_dim: 1,
            hidden: vec![],
            activation: Activation::None,
            hidden_bias: false,
        }
    }

    pub fn deep1d() -> Self {
        ModelSpec {
            kind: ModelKind::Deep1d,
            ..ModelSpec::shallow1d()
        }
    }

    pub fn logistic(input_dim: usize, output_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            output_dim,
            ..ModelSpec::shallow1d()
        }
    }

    pub fn linnet(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linnet,
            input_dim,
            output_dim,
            hidden,
            ..ModelSpec::shallow1d()
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            output_dim,
            hidden,
            activation: Activation::Relu,
            hidden_bias: true,
        }
    }

    /// Checks the spec and fills in forced fields.
    pub fn validated(&self) -> Result<ModelSpec> {
        let mut s = self.clone();
        match s.kind {
            ModelKind::Shallow1d | ModelKind::Deep1d => {
                if s.input_dim != 1 || s.output_dim != 1 || !s.hidden.is_empty() {
                    return Err(Error::config(format!(
                        "{} is one-dimensional with no hidden layers",
                        s.kind.name()
                    )));
                }
                s.activation = Activation::None;
            }
            ModelKind::Logistic => {
                if !s.hidden.is_empty() {
                    return Err(Error::config("logistic has no hidden layers"));
                }
            }
            ModelKind::Linnet => {
                if s.hidden.is_empty() {
                    return Err(Error::config("linnet needs at least one hidden layer"));
                }
                s.activation = Activation::None;
            }
            ModelKind::Mlp => {
                s.hidden_bias = true;
            }
        }
        if s.input_dim == 0 || s.output_dim == 0 || s.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub freeze_mask: Vec<bool>,
}

/// Graph handles for one layer's parameters.
#[derive(Copy, Clone, Debug)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let spec = spec.validated()?;
    let mut rng = rng::stream(seed, Stream::Init, 0);
    let mut layers = Vec::new();
    let dense = |name: String, fan_in: usize, fan_out: usize, bias: bool, rng: &mut _| Layer {
        name,
        weight: rng::normal_tensor(rng, &[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt()),
        bias: bias.then(|| Tensor::zeros(&[fan_out])),
    };
    match spec.kind {
        ModelKind::Shallow1d => layers.push(dense("c".into(), 1, 1, false, &mut rng)),
        ModelKind::Deep1d => {
            layers.push(dense("a".into(), 1, 1, false, &mut rng));
            layers.push(dense("b".into(), 1, 1, false, &mut rng));
        }
        ModelKind::Logistic | ModelKind::Linnet | ModelKind::Mlp => {
            let mut fan_in = spec.input_dim;
            for (i, &w) in spec.hidden.iter().enumerate() {
                layers.push(dense(format!("hidden{}", i + 1), fan_in, w, spec.hidden_bias, &mut rng));
                fan_in = w;
            }
            layers.push(dense("head".into(), fan_in, spec.output_dim, true, &mut rng));
        }
    }
    let freeze_mask = vec![false; layers.len()];
    Ok(Model {
        spec,
        layers,
        freeze_mask,
    })
}

impl Model {
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| {
            Error::config(format!(
                "unknown layer `{name}`; valid layers: {}",
                self.layer_names().join(", ")
            ))
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameter tensors in order: each layer's weight, then its bias.
    pub fn flat_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.clone());
            if let Some(b) = &l.bias {
                out.push(b.clone());
            }
        }
        out
    }

    /// Layer index of every entry of [`Model::flat_params`].
    pub fn flat_layer_index(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(i);
            if l.bias.is_some() {
                out.push(i);
            }
        }
        out
    }

    pub fn with_flat_params(&self, params: Vec<Tensor>) -> Result<Model> {
        let mut m = self.clone();
        let mut it = params.into_iter();
        for l in &mut m.layers {
            let w = it.next().ok_or_else(|| Error::contract("too few parameter tensors"))?;
            if w.shape() != l.weight.shape() {
                return Err(Error::shape("with_flat_params", l.weight.shape(), w.shape()));
            }
            l.weight = w;
            if let Some(b) = &mut l.bias {
                let nb = it.next().ok_or_else(|| Error::contract("too few parameter tensors"))?;
                if nb.shape() != b.shape() {
                    return Err(Error::shape("with_flat_params", b.shape(), nb.shape()));
                }
                *b = nb;
            }
        }
        if it.next().is_some() {
            return Err(Error::contract("too many parameter tensors"));
        }
        Ok(m)
    }

    /// Per-parameter-tensor freeze flags, aligned with [`Model::flat_params`].
    pub fn flat_freeze(&self) -> Vec<bool> {
        self.flat_layer_index()
            .into_iter()
            .map(|i| self.freeze_mask[i])
            .collect()
    }

    pub fn set_freeze(&self, mask: &[bool]) -> Result<Model> {
        if mask.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "freeze mask has {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        let mut m = self.clone();
        m.freeze_mask = mask.to_vec();
        Ok(m)
    }

    /// Adds every parameter tensor to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.flat_params().into_iter().map(|t| g.param(t)).collect()
    }

    /// Groups flat parameter nodes back into layers.
    pub fn group(&self, flat: &[NodeId]) -> Result<Vec<LayerNodes>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            let weight = *flat.get(k).ok_or_else(|| Error::contract("too few parameter nodes"))?;
            k += 1;
            let bias = if l.bias.is_some() {
                k += 1;
                Some(
                    *flat
                        .get(k - 1)
                        .ok_or_else(|| Error::contract("too few parameter nodes"))?,
                )
            } else {
                None
            };
            out.push(LayerNodes { weight, bias });
        }
        if k != flat.len() {
            return Err(Error::contract("too many parameter nodes"));
        }
        Ok(out)
    }

    /// Output node `[batch, output_dim]` for inputs `x` `[batch, input_dim]`
    /// given parameter nodes in flat order.
    pub fn forward_nodes(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let layers = self.group(params)?;
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                &xs,
                &[xs.first().copied().unwrap_or(0), self.spec.input_dim],
            ));
        }
        let batch = xs[0];
        let mut h = x;
        let last = layers.len() - 1;
        for (i, ln) in layers.iter().enumerate() {
            let wt = g.transpose(ln.weight)?;
            h = g.matmul(h, wt)?;
            if let Some(b) = ln.bias {
                let bb = g.broadcast_rows(b, batch)?;
                h = g.add(h, bb)?;
            }
            if i != last && self.spec.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass with parameters as constants.
    pub fn forward(&self, x: &Tensor, g: &mut Graph) -> Result<NodeId> {
        let params: Vec<NodeId> = self.flat_params().into_iter().map(|t| g.constant(t)).collect();
        let xn = g.constant(x.clone());
        self.forward_nodes(g, &params, xn)
    }

    /// Evaluates the model outside of any caller graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(x, &mut g)?;
        Ok(g.evaluate(out)?.clone())
    }

    /// Scalar product of all weights of a one-dimensional model.
    pub fn effective_scalar(&self) -> Result<f64> {
        match self.spec.kind {
            ModelKind::Shallow1d | ModelKind::Deep1d => Ok(self.layers.iter().map(|l| l.weight.data()[0]).product()),
            _ => Err(Error::contract("effective_scalar needs a one-dimensional model")),
        }
    }

    pub fn is_linear(&self) -> bool {
        match self.spec.kind {
            ModelKind::Shallow1d | ModelKind::Deep1d | ModelKind::Logistic | ModelKind::Linnet => true,
            ModelKind::Mlp => self.spec.activation == Activation::None,
        }
    }

    /// Replaces the stack of affine layers by the single equivalent
    /// layer. `deep1d` becomes `shallow1d`, `linnet` becomes `logistic`.
    pub fn collapse_linear(&self) -> Result<Model> {
        let kind = match self.spec.kind {
            ModelKind::Deep1d => ModelKind::Shallow1d,
            ModelKind::Linnet => ModelKind::Logistic,
            other => {
                return Err(Error::contract(format!(
                    "collapse needs a linnet or deep1d model, got {}",
                    other.name()
                )))
            }
        };
        if !self.is_linear() {
            return Err(Error::contract("collapse needs a model without nonlinear activations"));
        }
        let mut w = self.layers[0].weight.clone();
        let mut b = self.layers[0].bias.clone();
        for l in &self.layers[1..] {
            b = match (b, &l.bias) {
                (None, None) => None,
                (prev, lb) => {
                    let carried = match prev {
                        Some(pb) => {
                            let n = pb.numel();
                            l.weight
                                .matmul(&pb.reshape(&[n, 1])?)?
                                .reshape(&[l.weight.shape()[0]])?
                        }
                        None => Tensor::zeros(&[l.weight.shape()[0]]),
                    };
                    Some(match lb {
                        Some(lb) => carried.add(lb)?,
                        None => carried,
                    })
                }
            };
            w = l.weight.matmul(&w)?;
        }
        let name = if kind == ModelKind::Shallow1d { "c" } else { "head" };
        let spec = ModelSpec {
            kind,
            input_dim: self.spec.input_dim,
            output_dim: self.spec.output_dim,
            hidden: vec![],
            activation: Activation::None,
            hidden_bias: false,
        };
        let bias = if kind == ModelKind::Logistic {
            Some(b.unwrap_or_else(|| Tensor::zeros(&[self.spec.output_dim])))
        } else {
            None
        };
        Ok(Model {
            spec,
            layers: vec![Layer {
                name: name.into(),
                weight: w,
                bias,
            }],
            freeze_mask: vec![false],
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "metagrad-checkpoint/1";

/// On-disk checkpoint: the model plus an optional meta-optimizer state.
/// Floats are written as shortest round-trip decimals, so a save/load
/// cycle is lossless.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<crate::metaopt::MetaOptimizer>,
}

impl Checkpoint {
    pub fn new(model: Model, xi: Option<crate::metaopt::MetaOptimizer>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model,
            xi,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        ck.model.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

impl Model {
    /// Structural consistency of a deserialized model.
    pub fn validate(&self) -> Result<()> {
        if self.freeze_mask.len() != self.layers.len() {
            return Err(Error::config("freeze mask length differs from layer count"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut fan_in = self.spec.input_dim;
        for l in &self.layers {
            let s = l.weight.shape();
            if s.len() != 2 || s[1] != fan_in {
                return Err(Error::shape("checkpoint layer", s, &[0, fan_in]));
            }
            if let Some(b) = &l.bias {
                if b.shape() != [s[0]] {
                    return Err(Error::shape("checkpoint bias", b.shape(), &[s[0]]));
                }
            }
            fan_in = s[0];
        }
        if fan_in != self.spec.output_dim {
            return Err(Error::config("last layer width differs from output_dim"));
        }
        Ok(())
    }
}

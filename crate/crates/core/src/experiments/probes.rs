//! Post-hoc probes of a meta-trained checkpoint: layer freezing,
//! layer perturbation and linear collapse.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::maml::{adapt, eval_task_set, evaluate, mean_std, EvalSummary, InnerConfig};
use crate::metaopt::MetaOptimizer;
use crate::models::{Checkpoint, Model};
use crate::rng::{self, Stream};
use crate::tasks::{TaskData, TaskDistribution};
use crate::tensor::Tensor;

/// Held-out tasks and the adaptation used to probe a checkpoint.
#[derive(Clone, Debug)]
pub struct ProbeSetup {
    pub tasks: TaskDistribution,
    pub eval: InnerConfig,
    pub count: usize,
    pub seed: u64,
}

impl ProbeSetup {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        ProbeSetup {
            tasks: cfg.tasks.clone(),
            eval: cfg.eval_cfg().clone(),
            count: cfg.eval_tasks,
            seed,
        }
    }

    pub fn task_set(&self) -> Result<Vec<TaskData>> {
        if self.count < 100 {
            return Err(Error::config(format!(
                "probes need at least 100 tasks, got {}",
                self.count
            )));
        }
        eval_task_set(&self.tasks, self.seed, self.count)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    FreezeOnly,
    AdaptOnly,
}

impl AblationMode {
    pub fn tag(self) -> &'static str {
        match self {
            AblationMode::FreezeOnly => "freeze-only",
            AblationMode::AdaptOnly => "adapt-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full`, `none`, or `<mode>:<layer>`.
    pub tag: String,
    pub layer: Option<String>,
    pub mode: Option<AblationMode>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub full: AblationRow,
    /// Every layer frozen: the initialization's own accuracy.
    pub none: AblationRow,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn row(&self, layer: &str, mode: AblationMode) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.layer.as_deref() == Some(layer) && r.mode == Some(mode))
    }

    /// Layers whose adapt-only accuracy is within `adapt_tol` of full
    /// adaptation while their freeze-only accuracy drops by at least
    /// `freeze_drop`.
    pub fn critical_layers(&self, adapt_tol: f64, freeze_drop: f64) -> Vec<String> {
        let Some(full) = self.full.mean_accuracy else {
            return vec![];
        };
        let mut layers: Vec<String> = self.rows.iter().filter_map(|r| r.layer.clone()).collect();
        layers.dedup();
        layers
            .into_iter()
            .filter(|l| {
                let a = self.row(l, AblationMode::AdaptOnly).and_then(|r| r.mean_accuracy);
                let f = self.row(l, AblationMode::FreezeOnly).and_then(|r| r.mean_accuracy);
                matches!((a, f), (Some(a), Some(f)) if (full - a).abs() <= adapt_tol && full - f >= freeze_drop)
            })
            .collect()
    }
}

fn row_from(tag: String, layer: Option<String>, mode: Option<AblationMode>, s: &EvalSummary) -> AblationRow {
    AblationRow {
        tag,
        layer,
        mode,
        mean_accuracy: s.mean_accuracy,
        std_accuracy: s.std_accuracy,
        mean_loss: s.mean_loss,
        std_loss: s.std_loss,
        tasks: s.tasks,
    }
}

/// Re-runs adaptation with freeze-only / adapt-only masks for each of
/// `layers` (all layers when empty). Unknown names are config errors.
pub fn ablate(
    ckpt: &Checkpoint,
    setup: &ProbeSetup,
    layers: &[String],
    modes: &[AblationMode],
) -> Result<AblationTable> {
    let model = &ckpt.model;
    let names: Vec<String> = if layers.is_empty() {
        model.layer_names().iter().map(|s| s.to_string()).collect()
    } else {
        layers.to_vec()
    };
    let idx = names.iter().map(|n| model.layer_index(n)).collect::<Result<Vec<_>>>()?;
    let tasks = setup.task_set()?;
    let xi = ckpt.xi.as_ref();
    let n_layers = model.layers.len();
    let run = |frozen: Vec<bool>| -> Result<EvalSummary> {
        let m = model.set_freeze(&frozen)?;
        evaluate(&m, xi, &tasks, &setup.eval)
    };
    let full = row_from("full".into(), None, None, &run(vec![false; n_layers])?);
    let none = row_from("none".into(), None, None, &run(vec![true; n_layers])?);
    let mut rows = Vec::new();
    for (name, &li) in names.iter().zip(&idx) {
        for &mode in modes {
            let frozen: Vec<bool> = (0..n_layers)
                .map(|k| match mode {
                    AblationMode::FreezeOnly => k == li,
                    AblationMode::AdaptOnly => k != li,
                })
                .collect();
            let s = run(frozen)?;
            rows.push(row_from(
                format!("{}:{name}", mode.tag()),
                Some(name.clone()),
                Some(mode),
                &s,
            ));
        }
    }
    Ok(AblationTable { full, none, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub sigma: f64,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_loss: f64,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbTable {
    pub layer: String,
    /// Spread of the layer's entries that scales the noise.
    pub layer_std: f64,
    pub rows: Vec<PerturbRow>,
    /// Rank correlation of accuracy (loss for regression) with sigma.
    pub spearman: f64,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

fn layer_spread(model: &Model, li: usize) -> f64 {
    let layer = &model.layers[li];
    let mut vals: Vec<f64> = layer.weight.data().to_vec();
    if let Some(b) = &layer.bias {
        vals.extend_from_slice(b.data());
    }
    let (_, s) = mean_std(&vals);
    if s > 0.0 && s.is_finite() {
        s
    } else {
        (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt()
    }
}

/// Adds `σ · std(layer) · z` to the named layer before adaptation, with
/// one fixed standard normal `z` per task shared across the sigma sweep.
/// All layers still adapt.
pub fn perturb(ckpt: &Checkpoint, setup: &ProbeSetup, layer: &str, sigmas: &[f64]) -> Result<PerturbTable> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::config(format!("sigma must be non-negative, got {s}")));
    }
    if sigmas.is_empty() {
        return Err(Error::config("at least one sigma is required"));
    }
    let model = &ckpt.model;
    let li = model.layer_index(layer)?;
    let spread = layer_spread(model, li);
    let tasks = setup.task_set()?;
    let xi: Option<&MetaOptimizer> = ckpt.xi.as_ref();
    let noise: Vec<(Tensor, Option<Tensor>)> = (0..tasks.len())
        .map(|i| {
            let mut r = rng::stream(setup.seed, Stream::Perturb, i as u64);
            let l = &model.layers[li];
            let w = rng::normal_tensor(&mut r, l.weight.shape(), 1.0);
            let b = l.bias.as_ref().map(|b| rng::normal_tensor(&mut r, b.shape(), 1.0));
            (w, b)
        })
        .collect();
    let mut rows = Vec::new();
    for &sigma in sigmas {
        let per_task: Vec<Option<(f64, Option<f64>)>> = tasks
            .par_iter()
            .zip(&noise)
            .map(|(d, (zw, zb))| {
                let mut m = model.clone();
                let l = &mut m.layers[li];
                l.weight = l.weight.add(&zw.scale(sigma * spread))?;
                if let (Some(b), Some(z)) = (&mut l.bias, zb) {
                    *b = b.add(&z.scale(sigma * spread))?;
                }
                match adapt(&m, xi, d, &setup.eval) {
                    Ok((_, _, t)) => Ok(Some((*t.query_loss.last().unwrap(), *t.query_accuracy.last().unwrap()))),
                    Err(Error::Divergence { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let diverged = per_task.iter().filter(|p| p.is_none()).count();
        let losses: Vec<f64> = per_task.iter().flatten().map(|p| p.0).collect();
        let classify = per_task.iter().flatten().any(|p| p.1.is_some());
        let accs: Vec<f64> = per_task
            .iter()
            .filter_map(|p| match p {
                Some((_, a)) => *a,
                None => classify.then_some(0.0),
            })
            .collect();
        let (ma, sa) = if accs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&accs);
            (Some(m), Some(s))
        };
        rows.push(PerturbRow {
            sigma,
            mean_accuracy: ma,
            std_accuracy: sa,
            mean_loss: mean_std(&losses).0,
            diverged,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    // higher is better for accuracy; for regression use negated loss
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_accuracy.unwrap_or(-r.mean_loss)).collect();
    Ok(PerturbTable {
        layer: layer.into(),
        layer_std: spread,
        spearman: spearman(&xs, &ys),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub tasks: usize,
    pub original_accuracy: Option<f64>,
    pub collapsed_accuracy: Option<f64>,
    pub original_loss: f64,
    pub collapsed_loss: f64,
    /// `(original, collapsed)` post-adaptation accuracy per task.
    pub paired: Vec<(f64, f64)>,
    /// Largest pre-adaptation output difference over all query inputs.
    pub forward_max_diff: f64,
}

/// Paired evaluation of a linear checkpoint against its single-layer
/// collapse on identical tasks. The collapsed model adapts with plain
/// gradients.
pub fn collapse(ckpt: &Checkpoint, setup: &ProbeSetup) -> Result<CollapseReport> {
    if !ckpt.model.is_linear() {
        return Err(Error::config(format!(
            "collapse needs a purely linear checkpoint; `{}` model is nonlinear",
            ckpt.model.spec.kind.name()
        )));
    }
    let collapsed = ckpt.model.collapse_linear()?;
    let tasks = setup.task_set()?;
    let mut worst: f64 = 0.0;
    for d in &tasks {
        if let TaskData::Samples(ds) = d {
            for x in [&ds.support_x, &ds.query_x] {
                let a = ckpt.model.predict(x)?;
                let b = collapsed.predict(x)?;
                worst = worst.max(a.max_abs_diff(&b)?);
            }
        }
    }
    let orig = evaluate(&ckpt.model, ckpt.xi.as_ref(), &tasks, &setup.eval)?;
    let col = evaluate(&collapsed, None, &tasks, &setup.eval)?;
    let paired = orig
        .accuracies
        .iter()
        .copied()
        .zip(col.accuracies.iter().copied())
        .collect();
    Ok(CollapseReport {
        tasks: tasks.len(),
        original_accuracy: orig.mean_accuracy,
        collapsed_accuracy: col.mean_accuracy,
        original_loss: orig.mean_loss,
        collapsed_loss: col.mean_loss,
        paired,
        forward_max_diff: worst,
    })
}

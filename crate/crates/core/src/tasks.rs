//! Synthetic task distributions and their support/query episodes.
//!
//! Task parameters are drawn from the `Task` stream of a task seed; the
//! support set from its `Data` stream and the query set from its `Query`
//! stream, so the two splits never share draws.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression1d,
    Logistic2d,
    Kway,
}

/// How binary labels are produced from `σ(θᵀx)`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// `y ~ Bernoulli(σ(θᵀx))`.
    #[default]
    Sampled,
    /// `y = [θᵀx > 0]`.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub kind: TaskKind,
    /// Scalar for regression, `[dim]` for binary, `[ways, dim]` for k-way.
    pub theta: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    pub shots: usize,
    pub ways: usize,
}

/// What a task episode offers the inner and outer losses: finite samples,
/// or the exact population loss of a 1D regression task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Samples(Dataset),
    /// `½ E (y − wx)² = ½((w − θ)² + 1)` for one task.
    Population {
        theta: f64,
    },
    /// Many population tasks evaluated side by side; `thetas` is `[n]`.
    PopulationBatch {
        thetas: Tensor,
    },
}

pub fn sample_regression_task(seed: u64) -> TaskParams {
    let mut r = rng::stream(seed, Stream::Task, 0);
    TaskParams {
        kind: TaskKind::Regression1d,
        theta: Tensor::scalar(rng::normal(&mut r)),
    }
}

pub fn sample_logistic_task(seed: u64, dim: usize) -> TaskParams {
    let mut r = rng::stream(seed, Stream::Task, 0);
    TaskParams {
        kind: TaskKind::Logistic2d,
        theta: rng::normal_tensor(&mut r, &[dim], 1.0),
    }
}

pub fn sample_kway_task(seed: u64, ways: usize, dim: usize) -> Result<TaskParams> {
    if ways < 2 {
        return Err(Error::contract(format!("k-way tasks need ways >= 2, got {ways}")));
    }
    let mut r = rng::stream(seed, Stream::Task, 0);
    Ok(TaskParams {
        kind: TaskKind::Kway,
        theta: rng::normal_tensor(&mut r, &[ways, dim], 1.0),
    })
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Copy, Clone, Debug, Default)]
pub struct SampleOptions {
    pub labels: LabelMode,
    /// Drop the observation noise of regression tasks.
    pub noiseless: bool,
}

impl TaskParams {
    pub fn dim(&self) -> usize {
        match self.kind {
            TaskKind::Regression1d => 1,
            TaskKind::Logistic2d => self.theta.numel(),
            TaskKind::Kway => self.theta.shape()[1],
        }
    }

    pub fn ways(&self) -> usize {
        match self.kind {
            TaskKind::Regression1d => 1,
            TaskKind::Logistic2d => 2,
            TaskKind::Kway => self.theta.shape()[0],
        }
    }

    /// Labels for the rows of `x` (`[n, dim]`).
    pub fn label(&self, x: &Tensor, opts: SampleOptions, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let n = x.shape()[0];
        let d = self.dim();
        let th = self.theta.data();
        match self.kind {
            TaskKind::Regression1d => {
                let data = x
                    .data()
                    .iter()
                    .map(|&xi| th[0] * xi + if opts.noiseless { 0.0 } else { rng::normal(r) })
                    .collect();
                Tensor::new(vec![n, 1], data).expect("regression labels")
            }
            TaskKind::Logistic2d => {
                let data = x
                    .data()
                    .chunks(d)
                    .map(|row| {
                        let z: f64 = row.iter().zip(th).map(|(a, b)| a * b).sum();
                        let on = match opts.labels {
                            LabelMode::Hard => z > 0.0,
                            LabelMode::Sampled => r.random::<f64>() < sigmoid(z),
                        };
                        if on {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::new(vec![n, 1], data).expect("binary labels")
            }
            TaskKind::Kway => {
                let k = self.ways();
                let mut data = vec![0.0; n * k];
                for (i, row) in x.data().chunks(d).enumerate() {
                    let mut best = (0, f64::NEG_INFINITY);
                    for c in 0..k {
                        let z: f64 = row.iter().zip(&th[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
                        if z > best.1 {
                            best = (c, z);
                        }
                    }
                    data[i * k + best.0] = 1.0;
                }
                Tensor::new(vec![n, k], data).expect("one-hot labels")
            }
        }
    }
}

/// Support set of `shots · ways` rows and query set of `query · ways` rows
/// (`ways = 1` for regression).
pub fn sample_data(task: &TaskParams, shots: usize, query: usize, seed: u64, opts: SampleOptions) -> Result<Dataset> {
    if shots == 0 || query == 0 {
        return Err(Error::contract("shots and query size must be positive"));
    }
    let ways = task.ways();
    let rows_per = if task.kind == TaskKind::Regression1d { 1 } else { ways };
    let d = task.dim();
    let draw = |stream: Stream, rows: usize| {
        let mut r = rng::stream(seed, stream, 0);
        let x = rng::normal_tensor(&mut r, &[rows, d], 1.0);
        let y = task.label(&x, opts, &mut r);
        (x, y)
    };
    let (support_x, support_y) = draw(Stream::Data, shots * rows_per);
    let (query_x, query_y) = draw(Stream::Query, query * rows_per);
    Ok(Dataset {
        support_x,
        support_y,
        query_x,
        query_y,
        shots,
        ways,
    })
}

/// A task family together with its episode sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub kind: TaskKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_ways")]
    pub ways: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_query")]
    pub query: usize,
    #[serde(default)]
    pub labels: LabelMode,
    #[serde(default)]
    pub noiseless: bool,
    /// Use the exact population loss instead of samples (1D regression).
    #[serde(default)]
    pub population: bool,
}

fn default_dim() -> usize {
    2
}
fn default_ways() -> usize {
    2
}
fn default_shots() -> usize {
    5
}
fn default_query() -> usize {
    15
}

impl TaskDistribution {
    pub fn regression_population() -> Self {
        TaskDistribution {
            kind: TaskKind::Regression1d,
            dim: 1,
            ways: 1,
            shots: 10,
            query: 10,
            labels: LabelMode::Sampled,
            noiseless: false,
            population: true,
        }
    }

    pub fn logistic2d(labels: LabelMode) -> Self {
        TaskDistribution {
            kind: TaskKind::Logistic2d,
            dim: 2,
            ways: 2,
            shots: 5,
            query: 15,
            labels,
            noiseless: false,
            population: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.query == 0 {
            return Err(Error::config("shots and query must be positive"));
        }
        if self.population && self.kind != TaskKind::Regression1d {
            return Err(Error::config("population losses exist only for regression1d"));
        }
        if self.kind == TaskKind::Kway && self.ways < 2 {
            return Err(Error::config("k-way tasks need ways >= 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        Ok(())
    }

    pub fn task(&self, task_seed: u64) -> Result<TaskParams> {
        Ok(match self.kind {
            TaskKind::Regression1d => sample_regression_task(task_seed),
            TaskKind::Logistic2d => sample_logistic_task(task_seed, self.dim),
            TaskKind::Kway => sample_kway_task(task_seed, self.ways, self.dim)?,
        })
    }

    /// Episode `index` of the family keyed by `seed`.
    pub fn episode(&self, seed: u64, index: u64) -> Result<(TaskParams, TaskData)> {
        let task_seed = rng::mix(seed, index);
        let task = self.task(task_seed)?;
        let data = if self.population {
            TaskData::Population {
                theta: task.theta.item()?,
            }
        } else {
            let opts = SampleOptions {
                labels: self.labels,
                noiseless: self.noiseless,
            };
            TaskData::Samples(sample_data(&task, self.shots, self.query, task_seed, opts)?)
        };
        Ok((task, data))
    }
}

/// Writes `split,x0,..,label` rows; k-way labels are class indices.
pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = data.support_x.cols();
    let mut header = vec!["split".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.push("label".into());
    w.write_record(&header)?;
    for (split, x, y) in [
        ("support", &data.support_x, &data.support_y),
        ("query", &data.query_x, &data.query_y),
    ] {
        let k = y.cols();
        for (row, lab) in x.data().chunks(d).zip(y.data().chunks(k)) {
            let mut rec = vec![split.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            let label = if k == 1 {
                lab[0]
            } else {
                lab.iter().position(|&v| v == 1.0).unwrap_or(0) as f64
            };
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

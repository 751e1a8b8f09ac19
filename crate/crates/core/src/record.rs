//! Run records and the metrics CSV schema.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::maml::EvalSummary;
use crate::metaopt::MetaOptimizer;
use crate::models::Model;

/// Version of the metrics CSV column layout.
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    MetaTrain,
    MetaTest,
}

/// One metrics line. `accuracy` is empty for regression.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub ablation: String,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub inner_step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub seed: u64,
    pub iterations_completed: usize,
    pub divergence: Option<Divergence>,
    pub metrics: Vec<MetricRow>,
    /// `(iteration, flat parameters)` for models with at most two scalars.
    pub trajectory: Vec<(usize, Vec<f64>)>,
    pub final_eval: Option<EvalSummary>,
    pub final_model: Option<Model>,
    pub final_xi: Option<MetaOptimizer>,
}

impl ExperimentRecord {
    pub fn new(seed: u64) -> Self {
        ExperimentRecord {
            seed,
            iterations_completed: 0,
            divergence: None,
            metrics: Vec::new(),
            trajectory: Vec::new(),
            final_eval: None,
            final_model: None,
            final_xi: None,
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `run_id,seed,iteration,p0,p1` rows for every `(run_id, record)`.
pub fn write_trajectory_csv<W: Write>(runs: &[(String, &ExperimentRecord)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "seed", "iteration", "p0", "p1"])?;
    for (run_id, record) in runs {
        for (it, p) in &record.trajectory {
            let get = |i: usize| p.get(i).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([run_id.clone(), record.seed.to_string(), it.to_string(), get(0), get(1)])?;
        }
    }
    w.flush()?;
    Ok(())
}

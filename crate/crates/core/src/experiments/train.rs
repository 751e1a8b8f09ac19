use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::Manifest;
use crate::error::Result;
use crate::maml::{mean_std, meta_train};
use crate::models::Checkpoint;
use crate::record::{write_metrics_csv, write_trajectory_csv, Divergence, ExperimentRecord, MetricRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub iterations_completed: usize,
    pub divergence: Option<Divergence>,
    pub mean_loss: Option<f64>,
    pub std_loss: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub pre_adaptation_accuracy: Option<f64>,
    pub diverged_tasks: usize,
}

/// Per-seed results and their mean ± std across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub eval_tasks: usize,
    pub eval_steps: usize,
    pub seeds: Vec<SeedSummary>,
    pub mean_loss: Option<f64>,
    pub std_loss: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    /// Any seed stopped early because the meta-loss left the finite range.
    pub diverged: bool,
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub records: Vec<ExperimentRecord>,
}

fn across(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_std(&v);
    (Some(m), Some(s))
}

/// Meta-trains one run per configured seed. Seeds run concurrently; the
/// results come back in seed-list order.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bundle = cfg.bundle();
    let mut records: Vec<ExperimentRecord> = cfg
        .seeds
        .par_iter()
        .map(|&s| meta_train(&bundle, s))
        .collect::<Result<_>>()?;
    for r in &mut records {
        let run_id = format!("{}-seed{}", cfg.name, r.seed);
        for m in &mut r.metrics {
            m.run_id = run_id.clone();
        }
    }
    let seeds: Vec<SeedSummary> = records
        .iter()
        .map(|r| {
            let e = r.final_eval.as_ref();
            SeedSummary {
                seed: r.seed,
                iterations_completed: r.iterations_completed,
                divergence: r.divergence.clone(),
                mean_loss: e.map(|e| e.mean_loss),
                std_loss: e.map(|e| e.std_loss),
                mean_accuracy: e.and_then(|e| e.mean_accuracy),
                std_accuracy: e.and_then(|e| e.std_accuracy),
                pre_adaptation_accuracy: e.and_then(|e| e.pre_mean_accuracy),
                diverged_tasks: e.map_or(0, |e| e.diverged),
            }
        })
        .collect();
    let (mean_loss, std_loss) = across(seeds.iter().map(|s| s.mean_loss));
    let (mean_accuracy, std_accuracy) = across(seeds.iter().map(|s| s.mean_accuracy));
    let summary = TrainSummary {
        name: cfg.name.clone(),
        eval_tasks: cfg.eval_tasks,
        eval_steps: cfg.eval_cfg().steps,
        diverged: seeds.iter().any(|s| s.divergence.is_some()),
        seeds,
        mean_loss,
        std_loss,
        mean_accuracy,
        std_accuracy,
    };
    Ok(TrainOutcome { summary, records })
}

/// Writes `config.toml`, `manifest.json`, `metrics.csv`, `trajectory.csv`,
/// `summary.json` and `checkpoints/seed-<s>.json` under `dir`.
pub fn write_train_outputs(cfg: &ExperimentConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Manifest::new(cfg, "train").write(dir)?;

    let rows: Vec<MetricRow> = outcome.records.iter().flat_map(|r| r.metrics.iter().cloned()).collect();
    write_metrics_csv(&rows, fs::File::create(dir.join("metrics.csv"))?)?;

    let runs: Vec<(String, &ExperimentRecord)> = outcome
        .records
        .iter()
        .map(|r| (format!("{}-seed{}", cfg.name, r.seed), r))
        .collect();
    write_trajectory_csv(&runs, fs::File::create(dir.join("trajectory.csv"))?)?;

    for r in &outcome.records {
        if let Some(m) = &r.final_model {
            Checkpoint::new(m.clone(), r.final_xi.clone())
                .save(&dir.join(format!("checkpoints/seed-{}.json", r.seed)))?;
        }
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    Ok(())
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{deep_landscape, deep_maml_loss, stationary_points, DeepPoint, LandscapeCell, StationaryPoint};

pub const MIN_RESOLUTION: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub alpha: f64,
    pub range: (f64, f64),
    pub resolution: usize,
    pub stationary: Vec<StationaryPoint>,
    /// Grid cells lower than all eight neighbours.
    pub grid_minima: Vec<LandscapeCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub a: f64,
    pub b: f64,
    pub loss: f64,
}

pub fn landscape(alpha: f64, lo: f64, hi: f64, resolution: usize) -> Result<(Vec<LandscapeCell>, LandscapeReport)> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::config(format!(
            "resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    if !(hi > lo) {
        return Err(Error::config(format!("empty range [{lo}, {hi}]")));
    }
    let stationary = stationary_points(alpha)?;
    let cells = deep_landscape(alpha, lo, hi, resolution)?;
    let at = |i: usize, j: usize| cells[i * resolution + j].loss;
    let mut grid_minima = Vec::new();
    for i in 1..resolution - 1 {
        for j in 1..resolution - 1 {
            let v = at(i, j);
            let lower = (-1i64..=1)
                .flat_map(|di| (-1i64..=1).map(move |dj| (di, dj)))
                .filter(|&d| d != (0, 0))
                .all(|(di, dj)| v < at((i as i64 + di) as usize, (j as i64 + dj) as usize));
            if lower {
                grid_minima.push(cells[i * resolution + j].clone());
            }
        }
    }
    let report = LandscapeReport {
        alpha,
        range: (lo, hi),
        resolution,
        stationary,
        grid_minima,
    };
    Ok((cells, report))
}

/// Reads `run_id,seed,iteration,p0,p1` rows and evaluates the closed-form
/// loss at each recorded `(a, b)`.
pub fn overlay_trajectories(path: &Path, alpha: f64) -> Result<Vec<TrajectoryPoint>> {
    #[derive(Deserialize)]
    struct Row {
        run_id: String,
        seed: u64,
        iteration: usize,
        p0: f64,
        p1: Option<f64>,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let b = row
            .p1
            .ok_or_else(|| Error::config("trajectory rows need two parameters (a deep1d run)"))?;
        out.push(TrajectoryPoint {
            loss: deep_maml_loss(DeepPoint::new(row.p0, b), alpha),
            run_id: row.run_id,
            seed: row.seed,
            iteration: row.iteration,
            a: row.p0,
            b,
        });
    }
    Ok(out)
}

pub fn write_cells_csv(cells: &[LandscapeCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

//! Grid and temperature sweeps. Cells share one dataset and seed and run in
//! parallel; results come back in grid order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{RunConfig, Strategy};
use crate::data::Dataset;
use crate::error::{AmssError, Result};
use crate::train::{load_data, run_on_dataset};

/// Epochs over which the temperature sweep averages realized ratios.
pub const RATIO_WINDOW_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub strategy: String,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    /// `accuracy[i][j]` is the final test accuracy with `(axis1[i], axis2[j])`.
    pub accuracy: Vec<Vec<f64>>,
}

impl GridResult {
    /// Cell with the highest accuracy; ties go to the first in row order.
    pub fn best_cell(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                if a > self.accuracy[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Rows are modality 0's value, columns modality 1's.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{} m0\\m1", self.strategy);
        for v in &self.axis2 {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
        for (v, row) in self.axis1.iter().zip(&self.accuracy) {
            let _ = write!(s, "{v}");
            for a in row {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(AmssError::InvalidInput(format!("{name} is empty")));
    }
    if let Some(v) = axis.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(AmssError::InvalidInput(format!("{name} value {v} outside (0, 1]")));
    }
    Ok(())
}

/// Cell config: modality 0 takes `a`, modality 1 takes `b`, any further
/// modality stays at 1.
pub fn cell_config(base: &RunConfig, modalities: usize, a: f64, b: f64) -> Result<RunConfig> {
    let mut values = vec![1.0; modalities];
    values[0] = a;
    values[1] = b;
    let mut cfg = base.clone();
    cfg.strategy = match base.strategy {
        Strategy::GlobalWise(_) => Strategy::GlobalWise(values),
        Strategy::UniformMask(_) => Strategy::UniformMask(values),
        _ => {
            return Err(AmssError::InvalidInput(format!(
                "grid sweeps need global_wise or uniform_mask, got {}",
                base.strategy.name()
            )))
        }
    };
    Ok(cfg)
}

pub fn grid_sweep(config: &RunConfig, axis1: &[f64], axis2: &[f64]) -> Result<GridResult> {
    let data = load_data(config)?;
    grid_sweep_on(config, &data, axis1, axis2)
}

pub fn grid_sweep_on(config: &RunConfig, data: &Dataset, axis1: &[f64], axis2: &[f64]) -> Result<GridResult> {
    check_axis("axis1", axis1)?;
    check_axis("axis2", axis2)?;
    let k = data.spec.modalities;
    // Validate the strategy before launching any work.
    cell_config(config, k, axis1[0], axis2[0])?;
    let cells: Vec<(usize, usize)> = (0..axis1.len())
        .flat_map(|i| (0..axis2.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let cfg = cell_config(config, k, axis1[i], axis2[j])?;
            Ok(run_on_dataset(&cfg, data)?.final_test.accuracy)
        })
        .collect();
    let mut accuracy = vec![vec![0.0; axis2.len()]; axis1.len()];
    for (&(i, j), r) in cells.iter().zip(results) {
        accuracy[i][j] = r.map_err(|e| AmssError::SweepCell {
            row: i,
            col: j,
            source: Box::new(e),
        })?;
    }
    Ok(GridResult {
        strategy: config.strategy.name().to_string(),
        axis1: axis1.to_vec(),
        axis2: axis2.to_vec(),
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub accuracy: f64,
    /// Mean update ratio per modality over the first ten epochs.
    pub mean_ratio: Vec<f64>,
}

pub fn tau_sweep(config: &RunConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    let data = load_data(config)?;
    tau_sweep_on(config, &data, taus)
}

pub fn tau_sweep_on(config: &RunConfig, data: &Dataset, taus: &[f64]) -> Result<Vec<TauRow>> {
    if !matches!(config.strategy, Strategy::Amss | Strategy::AmssPlus) {
        return Err(AmssError::InvalidInput(format!(
            "temperature sweeps need amss or amss_plus, got {}",
            config.strategy.name()
        )));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(AmssError::InvalidInput(format!("tau {t} must be > 0")));
    }
    let results: Vec<Result<TauRow>> = taus
        .par_iter()
        .map(|&tau| {
            let mut cfg = config.clone();
            cfg.tau = tau;
            let out = run_on_dataset(&cfg, data)?;
            Ok(TauRow {
                tau,
                accuracy: out.final_test.accuracy,
                mean_ratio: out.mean_ratio(RATIO_WINDOW_EPOCHS),
            })
        })
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| AmssError::SweepCell {
                row: i,
                col: 0,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let k = rows.first().map_or(0, |r| r.mean_ratio.len());
    let mut s = String::from("tau,accuracy");
    for m in 0..k {
        let _ = write!(s, ",mean_rho_{m}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.tau, r.accuracy);
        for v in &r.mean_ratio {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

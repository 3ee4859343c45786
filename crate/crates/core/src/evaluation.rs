//! Fitting a test set over a grid of structures and moment counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, Table};
use crate::metrics::{self, EvalRecord};
use crate::objective::FitTarget;
use crate::optimizer::{self, FitConfig};
use crate::ph::MomentVector;
use crate::reparam::Structure;
use crate::sampler::Instance;

/// Thresholds reported by [`summarize`], in percent.
pub const ETAS: [f64; 3] = [0.2, 0.5, 1.0];

/// One fitting setting: a structure and a number of target moments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub structure: Structure,
    pub l: usize,
}

impl GridCell {
    pub fn label(&self) -> String {
        format!("{} l={}", self.structure, self.l)
    }
}

/// Outcome of one instance in one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub cell: usize,
    pub record: Option<EvalRecord>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Fits every instance in every cell. Failures are recorded per row.
/// `progress` receives `(cell, instance)` after each fit.
pub fn evaluate_grid(
    instances: &[Instance],
    cells: &[GridCell],
    base: &FitConfig,
    mut progress: impl FnMut(usize, usize, &EvalRow),
) -> Vec<EvalRow> {
    let mut rows = Vec::with_capacity(instances.len() * cells.len());
    for (ci, cell) in cells.iter().enumerate() {
        let mut config = base.clone();
        config.structure = cell.structure.clone();
        for (ii, inst) in instances.iter().enumerate() {
            let row = match fit_instance(inst, cell.l, &config) {
                Ok((record, loss)) => EvalRow {
                    cell: ci,
                    record: Some(record),
                    final_loss: Some(loss),
                    error: None,
                },
                Err(e) => EvalRow {
                    cell: ci,
                    record: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                },
            };
            progress(ci, ii, &row);
            rows.push(row);
        }
    }
    rows
}

fn fit_instance(inst: &Instance, l: usize, config: &FitConfig) -> Result<(EvalRecord, f64)> {
    if l > inst.moments.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} moments, {l} requested",
            inst.id,
            inst.moments.len()
        )));
    }
    let target = MomentVector(inst.moments[..l].to_vec());
    let result = optimizer::fit(&FitTarget::from_moments(target.clone())?, config)?;
    let fitted = result.ph.moments(l)?;
    let record = EvalRecord::new(inst.id.clone(), target, fitted, result.wall_time)?;
    Ok((record, result.final_loss))
}

/// Success rates and timing of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: GridCell,
    pub instances: usize,
    pub failures: usize,
    /// Success rate in percent at each of [`ETAS`]. Failed fits count as misses.
    pub success: Vec<f64>,
    pub mean_wall_time: f64,
}

pub fn summarize(cells: &[GridCell], rows: &[EvalRow]) -> Vec<CellSummary> {
    cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.cell == ci).collect();
            let records: Vec<EvalRecord> = mine.iter().filter_map(|r| r.record.clone()).collect();
            let total = mine.len();
            let success = ETAS
                .iter()
                .map(|&eta| {
                    if total == 0 {
                        0.0
                    } else {
                        100.0 * records.iter().filter(|r| r.is_accurate(eta)).count() as f64 / total as f64
                    }
                })
                .collect();
            let mean_wall_time = if records.is_empty() {
                f64::NAN
            } else {
                records.iter().map(|r| r.wall_time).sum::<f64>() / records.len() as f64
            };
            CellSummary {
                cell: cell.clone(),
                instances: total,
                failures: total - records.len(),
                success,
                mean_wall_time,
            }
        })
        .collect()
}

/// One row per (cell, instance).
pub fn rows_table(cells: &[GridCell], rows: &[EvalRow]) -> Result<Table> {
    let mut t = Table::new([
        "structure",
        "l",
        "instance",
        "max_mape",
        "final_loss",
        "wall_time",
        "error",
    ]);
    for r in rows {
        let cell = &cells[r.cell];
        let (inst, mape, time) = match &r.record {
            Some(rec) => (rec.instance.clone(), fmt_f64(rec.max_mape), fmt_f64(rec.wall_time)),
            None => (String::new(), String::new(), String::new()),
        };
        t.push(vec![
            cell.structure.to_string(),
            cell.l.to_string(),
            inst,
            mape,
            r.final_loss.map(fmt_f64).unwrap_or_default(),
            time,
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    Ok(t)
}

pub fn summary_table(summaries: &[CellSummary]) -> Result<Table> {
    let mut header = vec![
        "structure".to_string(),
        "l".into(),
        "instances".into(),
        "failures".into(),
    ];
    header.extend(ETAS.iter().map(|e| format!("success_eta_{e}")));
    header.push("mean_wall_time".into());
    let mut t = Table::new(header);
    for s in summaries {
        let mut row = vec![
            s.cell.structure.to_string(),
            s.cell.l.to_string(),
            s.instances.to_string(),
            s.failures.to_string(),
        ];
        row.extend(s.success.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(s.mean_wall_time));
        t.push(row)?;
    }
    Ok(t)
}

/// Success rate over the fitted records only, as in [`metrics::success_rate`].
pub fn record_success_rate(rows: &[EvalRow], eta: f64) -> Result<f64> {
    let recs: Vec<EvalRecord> = rows.iter().filter_map(|r| r.record.clone()).collect();
    metrics::success_rate(&recs, eta)
}

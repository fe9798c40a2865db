//! Grid sweeps over one or two config parameters.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::experiment::{build_report, prepare_data, run_repeat, write_file, CalibrationReport, RunArtifacts};
use crate::error::{Error, Result};

pub const SWEEP_SCHEMA: &str = "calibreg.sweep";
pub const SWEEP_SCHEMA_VERSION: u32 = 1;
pub const SELECTION_RULE: &str = "best_validation_accuracy";

/// One grid point: the values of each axis, in axis order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub values: Vec<Value>,
    pub config: ExperimentConfig,
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand_grid(cfg: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    if cfg.grid.is_empty() {
        return Err(Error::invalid("cli", "sweep config has an empty grid"));
    }
    cfg.validate()?;
    let mut combos: Vec<Vec<Value>> = vec![vec![]];
    for axis in &cfg.grid {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v.clone());
                    next
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(index, values)| {
            let mut point = cfg.clone();
            for (axis, v) in cfg.grid.iter().zip(&values) {
                point = point.with_param(&axis.param, v)?;
            }
            point.grid.clear();
            point.validate()?;
            Ok(GridPoint {
                index,
                values,
                config: point,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub index: usize,
    pub values: Vec<Value>,
    /// `None` when a repeat diverged.
    pub report: Option<CalibrationReport>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rule: String,
    pub index: usize,
    pub values: Vec<Value>,
    pub mean_val_accuracy: f64,
    pub mean_val_nll: f64,
}

pub struct SweepOutcome {
    pub params: Vec<String>,
    pub points: Vec<PointResult>,
    pub selection: Option<Selection>,
}

fn mean_val(report: &CalibrationReport) -> (f64, f64) {
    let n = report.runs.len() as f64;
    (
        report.runs.iter().map(|r| r.val_accuracy).sum::<f64>() / n,
        report.runs.iter().map(|r| r.val_nll).sum::<f64>() / n,
    )
}

/// Highest mean validation accuracy; ties go to lower validation NLL, then
/// to the earlier grid point.
pub fn select_best(points: &[PointResult]) -> Option<Selection> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let Some(rep) = &p.report else { continue };
        let (acc, nll) = mean_val(rep);
        let better = match best {
            None => true,
            Some((_, ba, bn)) => acc > ba || (acc == ba && nll < bn),
        };
        if better {
            best = Some((i, acc, nll));
        }
    }
    best.map(|(i, acc, nll)| Selection {
        rule: SELECTION_RULE.to_string(),
        index: points[i].index,
        values: points[i].values.clone(),
        mean_val_accuracy: acc,
        mean_val_nll: nll,
    })
}

/// Runs every (point, repeat) job on the current rayon pool.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<(SweepOutcome, Vec<Vec<Option<RunArtifacts>>>)> {
    let grid = expand_grid(cfg)?;
    let datas = grid
        .iter()
        .map(|p| prepare_data(&p.config))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.config.repeats).map(move |r| (i, r)))
        .collect();
    let results: Vec<Result<RunArtifacts>> = jobs
        .par_iter()
        .map(|&(i, r)| run_repeat(&grid[i].config, &datas[i], r))
        .collect();
    let mut per_point: Vec<Vec<Option<RunArtifacts>>> = grid.iter().map(|_| Vec::new()).collect();
    for (&(i, _), res) in jobs.iter().zip(results) {
        match res {
            Ok(a) => per_point[i].push(Some(a)),
            Err(Error::Diverged { .. }) => per_point[i].push(None),
            Err(e) => return Err(e),
        }
    }
    let mut points = Vec::new();
    for (p, runs) in grid.iter().zip(&per_point) {
        let diverged = runs.iter().any(Option::is_none);
        let report = if diverged {
            None
        } else {
            let arts: Vec<RunArtifacts> = runs.iter().flatten().cloned().collect();
            Some(build_report(&p.config, &arts)?)
        };
        points.push(PointResult {
            index: p.index,
            values: p.values.clone(),
            report,
            diverged,
        });
    }
    let selection = select_best(&points);
    Ok((
        SweepOutcome {
            params: cfg.grid.iter().map(|a| a.param.clone()).collect(),
            points,
            selection,
        },
        per_point,
    ))
}

fn value_cell(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    // Keep cells CSV-safe for object-valued axes.
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// One row per (grid point, repeat).
pub fn sweep_csv(outcome: &SweepOutcome) -> String {
    let mut s = format!("# {SWEEP_SCHEMA} v{SWEEP_SCHEMA_VERSION}\npoint,");
    for p in &outcome.params {
        let _ = write!(s, "{p},");
    }
    s.push_str(
        "repeat,seed,status,val_accuracy,val_nll,test_accuracy,test_nll,test_ece,test_ecd,f_l1,f_l2,train_f_l2,train_nll,tau,ts_ece,ts_nll,selected\n",
    );
    let selected = outcome.selection.as_ref().map(|s| s.index);
    for p in &outcome.points {
        let prefix: String = std::iter::once(p.index.to_string())
            .chain(p.values.iter().map(value_cell))
            .collect::<Vec<_>>()
            .join(",");
        let sel = u8::from(selected == Some(p.index));
        match &p.report {
            Some(rep) => {
                for r in &rep.runs {
                    let status = if r.collapsed { "collapsed" } else { "ok" };
                    let t = &r.test;
                    let ts = &r.temperature_scaling;
                    let _ = writeln!(
                        s,
                        "{prefix},{},{},{status},{},{},{},{},{},{},{},{},{},{},{},{},{},{sel}",
                        r.repeat,
                        r.seed,
                        r.val_accuracy,
                        r.val_nll,
                        t.accuracy,
                        t.nll,
                        t.ece,
                        t.ecd,
                        t.f_l1,
                        t.f_l2,
                        r.train_f_l2,
                        r.train_nll,
                        ts.tau,
                        ts.after.ece,
                        ts.after.nll,
                    );
                }
            }
            None => {
                let _ = writeln!(s, "{prefix},,,diverged,,,,,,,,,,,,,,{sel}");
            }
        }
    }
    s
}

pub fn write_sweep(outcome: &SweepOutcome, dir: &Path) -> Result<()> {
    write_file(&dir.join("sweep.csv"), &sweep_csv(outcome))?;
    let selection = serde_json::json!({
        "schema": SWEEP_SCHEMA,
        "version": SWEEP_SCHEMA_VERSION,
        "params": outcome.params,
        "selection": outcome.selection,
    });
    write_file(
        &dir.join("selection.json"),
        &serde_json::to_string_pretty(&selection).expect("selection serializes"),
    )?;
    for p in &outcome.points {
        if let Some(rep) = &p.report {
            write_file(&dir.join(format!("point{}", p.index)).join("report.json"), &rep.to_json())?;
        }
    }
    Ok(())
}

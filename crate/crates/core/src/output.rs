//! CSV and JSON artifacts of a fit.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::Result;
use crate::fpca::{FitReport, FpcaModel, ScoreSet};
use crate::funcdata::ObservationTable;

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn write_scores(dir: &Path, sets: &[ScoreSet]) -> Result<()> {
    for set in sets {
        let mut w = csv::Writer::from_path(dir.join(format!("scores_{}.csv", set.term)))?;
        w.write_record(["level", "k", "xi"])?;
        for (l, name) in set.level_names.iter().enumerate() {
            for k in 0..set.n {
                w.write_record([name.clone(), (k + 1).to_string(), set.get(l, k).to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Eigenfunctions, surfaces and the mean on the model grid.
pub fn write_model_tables(dir: &Path, model: &FpcaModel) -> Result<()> {
    let grid = model.domain.midpoint_grid(model.spec.grid_size);
    let mut w = csv::Writer::from_path(dir.join("mean.csv"))?;
    w.write_record(["t", "mu"])?;
    for &t in &grid {
        w.write_record([t.to_string(), model.mean.eval_checked(t)?.to_string()])?;
    }
    w.flush()?;
    for term in &model.terms {
        let e = &term.eigen;
        let d = e.n_grid();
        let mut w = csv::Writer::from_path(dir.join(format!("eigen_{}.csv", term.name)))?;
        w.write_record(["k", "nu", "component", "t", "phi"])?;
        for k in 0..e.truncation {
            for s in 0..e.rho {
                for (i, t) in e.grid.iter().enumerate() {
                    w.write_record([
                        (k + 1).to_string(),
                        e.values[k].to_string(),
                        (s + 1).to_string(),
                        t.to_string(),
                        e.functions[(s * d + i, k)].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let k = term.surface.grid_matrix(&grid)?;
        let mut w = csv::Writer::from_path(dir.join(format!("surface_{}.csv", term.name)))?;
        let rho = term.surface.rho;
        if rho == 1 {
            w.write_record(["t", "tprime", "value"])?;
        } else {
            w.write_record(["s", "sprime", "t", "tprime", "value"])?;
        }
        for s in 0..rho {
            for sp in 0..rho {
                for (a, t) in grid.iter().enumerate() {
                    for (b, u) in grid.iter().enumerate() {
                        let v = k[(s * grid.len() + a, sp * grid.len() + b)].to_string();
                        if rho == 1 {
                            w.write_record([t.to_string(), u.to_string(), v])?;
                        } else {
                            w.write_record([(s + 1).to_string(), (sp + 1).to_string(), t.to_string(), u.to_string(), v])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub fn summary_json(report: &FitReport, table: &ObservationTable) -> serde_json::Value {
    let m = &report.model;
    let terms: Vec<_> = m
        .terms
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "truncation": t.eigen.truncation,
                "eigenvalues": t.eigen.retained_values(),
                "lambda": t.lambda,
                "edf": t.edf,
            })
        })
        .collect();
    json!({
        "method": m.spec.method.label(),
        "n_curves": table.n_curves(),
        "n_obs": table.n_obs(),
        "terms": terms,
        "sigma2": m.sigma2,
        "sigma2_raw": m.sigma2_raw,
        "pve": m.pve_achieved,
        "pve_target": m.spec.pve,
        "pve_base": m.spec.pve_base,
        "mean_lambda": m.mean.lambda,
        "reml": m.fit.reml,
        "converged": m.fit.converged,
        "at_bound": m.fit.at_bound,
        "iterations": m.fit.iterations,
        "ridge": m.fit.ridge,
        "score_ridge_used": report.scores.ridge_used,
        "timings_ms": report.timings_ms,
    })
}

/// Everything `fit` writes: model.json, summary.json and the tables.
pub fn write_fit(dir: &Path, report: &FitReport, table: &ObservationTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("model.json"), serde_json::to_string(&report.model)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary_json(report, table))?)?;
    write_model_tables(dir, &report.model)?;
    write_scores(dir, &report.scores.sets)
}

/// Constraint matrices, penalties and the normal equations of the smoothing step.
pub fn dump_matrices(dir: &Path, report: &FitReport) -> Result<()> {
    let dir = dir.join("matrices");
    fs::create_dir_all(&dir)?;
    for (k, term) in report.layout.terms.iter().enumerate() {
        let mut wm = DMatrix::zeros(term.full_len(), term.n_cols);
        for full in 0..term.full_len() {
            wm[(full, term.local_col(full))] = 1.0;
        }
        write_matrix(&dir.join(format!("constraint_{}.csv", term.name)), &wm)?;
        for (j, s) in report.system.blocks[k].matrices.iter().enumerate() {
            write_matrix(&dir.join(format!("penalty_{}_{}.csv", term.name, j + 1)), s)?;
        }
    }
    write_matrix(&dir.join("xtwx.csv"), &report.system.xtwx)?;
    write_vector(&dir.join("xtwc.csv"), &report.system.xtwc)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FpcaModel> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Fitted curves on the model grid, long format.
pub fn write_fitted(path: &Path, table: &ObservationTable, grid: &[f64], fitted: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve_id", "t", "fitted"])?;
    for (id, curve) in table.curve_ids.iter().zip(fitted) {
        for (t, v) in grid.iter().zip(curve) {
            w.write_record([id.clone(), t.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

//! CSV and JSON artifacts of a run.

use std::fs;
use std::path::Path;

use lpvgp::{QpStatus, RunStatus, StepRecord, TrajectoryF64};
use serde::Serialize;
use serde_json::json;

use crate::config::{Format, ModelKind};
use crate::coverage::{coverage_report, CoverageReport, SnapshotRow};
use crate::experiment::{CaseResult, Experiment};
use crate::CliError;

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const SNAPSHOTS_CSV: &str = "horizon_snapshots.csv";
pub const COVERAGE_JSON: &str = "coverage.json";
pub const META_JSON: &str = "meta.json";

/// 17 significant digits.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn names(exp: &Experiment) -> (Vec<String>, Vec<String>, Vec<String>) {
    if exp.config.model.kind == ModelKind::UnbalancedDisk {
        return (vec!["theta".into(), "omega".into()], vec!["u".into()], vec!["p".into()]);
    }
    let base = &exp.model.base;
    let seq = |prefix: &str, n: usize| -> Vec<String> {
        if n == 1 { vec![prefix.to_string()] } else { (0..n).map(|j| format!("{prefix}{j}")).collect() }
    };
    let states = (0..base.n_x()).map(|j| format!("x{j}")).collect();
    (states, seq("u", base.n_u()), seq("p", base.n_p()))
}

pub fn write_trajectory_csv(exp: &Experiment, traj: &TrajectoryF64, path: &Path) -> Result<(), CliError> {
    let (xs, us, ps) = names(exp);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string(), "t".into()];
    header.extend(xs);
    header.extend(us.iter().cloned());
    header.extend(ps);
    header.push("cost".into());
    w.write_record(&header)?;
    let ts = exp.model.base.ts;
    for (k, x) in traj.states.iter().enumerate() {
        let rec = traj.records.get(k);
        let mut row = vec![k.to_string(), fmt_f(k as f64 * ts)];
        row.extend(x.iter().map(|v| fmt_f(*v)));
        match rec {
            Some(r) => row.extend(r.u_applied.iter().map(|v| fmt_f(*v))),
            None => row.extend(us.iter().map(|_| String::new())),
        }
        row.extend(exp.model.base.schedule(x).iter().map(|v| fmt_f(*v)));
        row.push(rec.map(|r| fmt_f(r.cost)).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `(k, i, n)` rows for `i = 0..=N+1`; `x_bar` is empty at `i = N+1` and the
/// prediction columns are empty where no GP produced a value.
pub fn snapshot_rows(records: &[StepRecord<f64>]) -> Vec<(SnapshotRow, [Option<f64>; 3])> {
    let mut out = Vec::new();
    for r in records {
        let big_n = r.e_hat.horizon();
        for i in 0..r.x_true.len() {
            for n in 0..r.x.len() {
                let predicted = i >= 1 && i <= big_n && r.e_hat.is_fitted(i, n);
                let row = SnapshotRow {
                    k: r.k,
                    i,
                    n,
                    e: r.errors[i][n],
                    e_hat_mean: predicted.then(|| r.e_hat.mean[(i - 1, n)]),
                    e_hat_std: predicted.then(|| r.e_hat.std[(i - 1, n)]),
                };
                let states = [Some(r.x_true[i][n]), Some(r.x_hat[i][n]), r.x_bar.get(i).map(|x| x[n])];
                out.push((row, states));
            }
        }
    }
    out
}

pub fn write_snapshots_csv(records: &[StepRecord<f64>], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "i", "n", "x_true", "x_pred", "x_bar", "e", "e_hat_mean", "e_hat_std"])?;
    let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
    for (row, [xt, xp, xb]) in snapshot_rows(records) {
        w.write_record([
            row.k.to_string(),
            row.i.to_string(),
            row.n.to_string(),
            opt(xt),
            opt(xp),
            opt(xb),
            fmt_f(row.e),
            opt(row.e_hat_mean),
            opt(row.e_hat_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn case_coverage(exp: &Experiment, traj: &TrajectoryF64) -> CoverageReport {
    let rows: Vec<_> = snapshot_rows(&traj.records).into_iter().map(|(r, _)| r).collect();
    coverage_report(&rows, exp.mpc.zscore, exp.config.output.coverage_from_k)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn status_json(status: RunStatus) -> serde_json::Value {
    match status {
        RunStatus::Completed => json!({ "kind": "completed" }),
        RunStatus::QpInfeasible { k } => json!({ "kind": "qp_infeasible", "k": k }),
    }
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn meta(exp: &Experiment, case: &CaseResult) -> serde_json::Value {
    let recs = &case.trajectory.records;
    let max = |f: &dyn Fn(&StepRecord<f64>) -> f64| recs.iter().map(f).fold(0.0, f64::max);
    let non_optimal: Vec<usize> = recs.iter().filter(|r| r.qp.status != QpStatus::Optimal).map(|r| r.k).collect();
    let inverted: Vec<usize> = recs.iter().filter(|r| r.tightening_inverted).map(|r| r.k).collect();
    let radius = exp.model.max_grid_radius(101).map(|(r, _)| r).unwrap_or(f64::NAN);
    json!({
        "case": if case.name.is_empty() { "single" } else { case.name },
        "error_correction": case.error_correction,
        "status": status_json(case.trajectory.status),
        "steps_requested": exp.steps,
        "steps_completed": recs.len(),
        "zscore": exp.mpc.zscore,
        "snapshot_k": exp.config.output.snapshot_k,
        "versions": {
            "lpvgp": env!("CARGO_PKG_VERSION"),
        },
        "timings": { "run_seconds": case.elapsed.as_secs_f64() },
        "stabilizer": {
            "k": rows_of(&exp.model.k),
            "p": rows_of(&exp.model.p),
            "max_grid_radius": radius,
        },
        "qp": {
            "max_primal": max(&|r| r.qp.primal),
            "max_stationarity": max(&|r| r.qp.stationarity),
            "max_complementarity": max(&|r| r.qp.complementarity),
            "non_optimal_steps": non_optimal,
        },
        "tightening_inverted_steps": inverted,
        "config": exp.config.to_toml(),
    })
}

/// Writes one case's artifacts into `dir` (created if needed).
pub fn write_case(exp: &Experiment, case: &CaseResult, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let out = &exp.config.output;
    if out.wants(Format::Csv) {
        write_trajectory_csv(exp, &case.trajectory, &dir.join(TRAJECTORY_CSV))?;
        write_snapshots_csv(&case.trajectory.records, &dir.join(SNAPSHOTS_CSV))?;
    }
    if out.wants(Format::Json) {
        write_json(&case_coverage(exp, &case.trajectory), &dir.join(COVERAGE_JSON))?;
        write_json(&meta(exp, case), &dir.join(META_JSON))?;
    }
    Ok(())
}

/// Median of `|e_{1|k}|` (Euclidean) over `k >= from_k`.
pub fn median_one_step_error(traj: &TrajectoryF64, from_k: usize) -> Option<f64> {
    let mut v: Vec<f64> = traj.records.iter().filter(|r| r.k >= from_k).map(|r| r.errors[1].norm()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn write_comparison(cases: &[CaseResult], dir: &Path) -> Result<(), CliError> {
    let summary: Vec<_> = cases
        .iter()
        .map(|c| {
            json!({
                "case": c.name,
                "status": status_json(c.trajectory.status),
                "steps_completed": c.trajectory.records.len(),
                "median_one_step_error_from_k10": median_one_step_error(&c.trajectory, 10),
            })
        })
        .collect();
    write_json(&json!({ "cases": summary }), &dir.join("comparison.json"))
}

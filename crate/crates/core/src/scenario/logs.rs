use std::path::Path;

use nalgebra::{DVector, Vector3, Vector4};

use crate::control::TrackingLog;
use crate::error::{Result, SmsError};
use crate::planner::{StepMetrics, TrajectoryPlan};

pub const PLAN_CSV: &str = "plan.csv";
pub const TRACKING_CSV: &str = "tracking.csv";

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

fn named<'a>(names: &'a [&'a str]) -> impl Iterator<Item = String> + 'a {
    names.iter().map(|s| s.to_string())
}

pub fn plan_header(n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain(indexed("q", n))
        .chain(indexed("qd", n))
        .chain(indexed("qdd", n))
        .chain(named(&["rbx", "rby", "rbz", "e1", "e2", "e3", "e4"]))
        .chain(named(&["vbx", "vby", "vbz", "wbx", "wby", "wbz", "rex", "rey", "rez"]))
        .chain(named(&["Hnorm", "cos_theta_a", "Ctilde", "step_cost"]))
        .chain(indexed("alpha", n))
        .collect()
}

pub fn tracking_header(n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain(indexed("qe", n))
        .chain(indexed("qde", n))
        .chain(indexed("s", n))
        .chain(indexed("tau", n))
        .chain(indexed("clamp", n))
        .chain(named(&["ee_err", "Vr", "Vs", "hl_norm", "ha_norm"]))
        .collect()
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> SmsError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SmsError::io(path, io),
            _ => unreachable!("checked to be an i/o error"),
        }
    } else {
        SmsError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| SmsError::io(path, e))
}

pub fn write_plan_csv(plan: &TrajectoryPlan, path: &Path) -> Result<()> {
    let n = plan.dof();
    let rows = (0..plan.t.len()).map(|k| {
        let m = &plan.metrics[k];
        let mut row = vec![fmt(plan.t[k])];
        for v in [&plan.q[k], &plan.qd[k], &plan.qdd[k]] {
            row.extend(v.iter().map(|x| fmt(*x)));
        }
        row.extend(plan.r_b[k].iter().map(|x| fmt(*x)));
        row.extend(plan.eps[k].iter().map(|x| fmt(*x)));
        for v in [&plan.v_b[k], &plan.w_b[k], &plan.r_e[k]] {
            row.extend(v.iter().map(|x| fmt(*x)));
        }
        row.extend([m.h_norm, m.cos_theta_a, m.c_tilde, m.step_cost].map(fmt));
        match plan.alpha.get(k) {
            Some(a) => row.extend(a.iter().map(|x| fmt(*x))),
            None => row.extend((0..n).map(|_| fmt(f64::NAN))),
        }
        row
    });
    write_rows(path, &plan_header(n), rows)
}

pub fn write_tracking_csv(log: &TrackingLog, path: &Path) -> Result<()> {
    let n = log.dof();
    let rows = (0..log.len()).map(|k| {
        let mut row = vec![fmt(log.t[k])];
        for v in [&log.q_e[k], &log.qd_e[k], &log.s[k], &log.tau[k]] {
            row.extend(v.iter().map(|x| fmt(*x)));
        }
        row.extend(log.clamped[k].iter().map(|&c| u8::from(c).to_string()));
        row.extend([log.ee_err[k], log.v_r[k], log.v_s[k], log.hl_norm[k], log.ha_norm[k]].map(fmt));
        row
    });
    write_rows(path, &tracking_header(n), rows)
}

/// Numeric table with a checked header.
struct Table {
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn read(path: &Path, expected: impl Fn(usize) -> Vec<String>, columns_per_joint: usize, fixed: usize) -> Result<(Self, usize)> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let parse_error = |message: String| SmsError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let n = header.len().saturating_sub(fixed) / columns_per_joint;
        let want = expected(n);
        if let Some(missing) = want.iter().find(|c| !header.contains(c)) {
            return Err(parse_error(format!("missing column `{missing}`")));
        }
        if header != want {
            return Err(parse_error(format!("columns do not match the schema: expected {}", want.join(","))));
        }
        let mut rows = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let row = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_error(format!("row {}: {e}", line + 2)))?;
            rows.push(row);
        }
        Ok((Table { rows }, n))
    }
}

fn vec_at(row: &[f64], start: usize, len: usize) -> DVector<f64> {
    DVector::from_column_slice(&row[start..start + len])
}

/// Reads a plan CSV. Constraint reports are left empty and `feasible` is set to true.
pub fn read_plan_csv(path: &Path, r_d: Vector3<f64>, dt: f64) -> Result<TrajectoryPlan> {
    // t, 4n joint columns (q, qd, qdd, alpha), 16 pose/velocity/position columns, 4 metrics.
    let (table, n) = Table::read(path, plan_header, 4, 21)?;
    let mut plan = TrajectoryPlan {
        dt,
        r_d,
        t: Vec::new(),
        q: Vec::new(),
        qd: Vec::new(),
        qdd: Vec::new(),
        r_b: Vec::new(),
        eps: Vec::new(),
        v_b: Vec::new(),
        w_b: Vec::new(),
        r_e: Vec::new(),
        alpha: Vec::new(),
        metrics: Vec::new(),
        reports: Vec::new(),
        feasible: true,
        diagnostics: Vec::new(),
    };
    let last = table.rows.len().saturating_sub(1);
    for (k, row) in table.rows.iter().enumerate() {
        plan.t.push(row[0]);
        plan.q.push(vec_at(row, 1, n));
        plan.qd.push(vec_at(row, 1 + n, n));
        plan.qdd.push(vec_at(row, 1 + 2 * n, n));
        let c = 1 + 3 * n;
        plan.r_b.push(Vector3::from_column_slice(&row[c..c + 3]));
        plan.eps.push(Vector4::from_column_slice(&row[c + 3..c + 7]));
        plan.v_b.push(Vector3::from_column_slice(&row[c + 7..c + 10]));
        plan.w_b.push(Vector3::from_column_slice(&row[c + 10..c + 13]));
        plan.r_e.push(Vector3::from_column_slice(&row[c + 13..c + 16]));
        let m = c + 16;
        plan.metrics.push(StepMetrics {
            h_norm: row[m],
            cos_theta_a: row[m + 1],
            c_tilde: row[m + 2],
            step_cost: row[m + 3],
        });
        if k < last {
            plan.alpha.push(vec_at(row, m + 4, n));
        }
    }
    if plan.t.len() < 2 {
        return Err(SmsError::Parse {
            path: path.to_path_buf(),
            message: "a plan needs at least two rows".into(),
        });
    }
    Ok(plan)
}

/// Reads a tracking CSV. Joint angles and base pose are not part of the file and stay empty.
pub fn read_tracking_csv(path: &Path, dt: f64, lambda: f64) -> Result<TrackingLog> {
    let (table, n) = Table::read(path, tracking_header, 5, 6)?;
    let mut log = TrackingLog {
        dt,
        lambda,
        ..TrackingLog::default()
    };
    for row in &table.rows {
        log.t.push(row[0]);
        log.q_e.push(vec_at(row, 1, n));
        log.qd_e.push(vec_at(row, 1 + n, n));
        log.s.push(vec_at(row, 1 + 2 * n, n));
        log.tau.push(vec_at(row, 1 + 3 * n, n));
        log.clamped.push(row[1 + 4 * n..1 + 5 * n].iter().map(|&c| c != 0.0).collect());
        let c = 1 + 5 * n;
        log.ee_err.push(row[c]);
        log.v_r.push(row[c + 1]);
        log.v_s.push(row[c + 2]);
        log.hl_norm.push(row[c + 3]);
        log.ha_norm.push(row[c + 4]);
    }
    Ok(log)
}

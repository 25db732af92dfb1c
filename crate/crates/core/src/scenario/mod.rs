//! Scenario files, end-to-end runs, run artifacts and their verification.
//!
//! A run directory holds `plan.csv`, `tracking.csv`, `constraints.json` and `manifest.json`.
//! Every number in the manifest except the wall time can be recomputed from the CSVs and the
//! configuration echoed in the manifest; [`verify`] does exactly that.

mod config;
mod logs;

pub use config::{
    load_config, BodySpec, ControllerSpec, InitialSpec, ModelSpec, Overrides, PlannerSpec, ScenarioConfig,
    ScenarioFile, TargetSpec, TrackingSpec, CASE1_TOML, CASE2_TOML, DEFAULT_TARGET_OFFSET,
};
pub use logs::{
    plan_header, read_plan_csv, read_tracking_csv, tracking_header, write_plan_csv, write_tracking_csv, PLAN_CSV,
    TRACKING_CSV,
};

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{closed_loop_simulate_from, lyapunov_check, LyapunovReport, TrackingLog};
use crate::error::{Result, SmsError};
use crate::planner::{constraint_reports, plan_trajectory, ConstraintReport, TrajectoryPlan};

pub const MANIFEST_JSON: &str = "manifest.json";
pub const CONSTRAINTS_JSON: &str = "constraints.json";

/// Bound on `|q_e|` over a tracking run, rad.
pub const MAX_JOINT_ERROR: f64 = 0.05;
/// Bound on the momentum norms over a tracking run.
pub const MOMENTUM_TOL: f64 = 1e-7;
/// Required share of outside-layer steps with non-increasing `V_r`.
pub const LYAPUNOV_MIN_FRACTION: f64 = 0.99;
/// Allowed relative error of the fitted `V_s` decay rate.
pub const DECAY_REL_TOL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Plan only.
    Plan,
    /// Plan and track.
    Track,
    /// Plan, track and check the Lyapunov conditions.
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Passed,
    Failed,
    Infeasible,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: Option<f64>,
    pub limit: f64,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            passed: value <= limit,
            value: Some(value),
            limit,
        }
    }

    fn below(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            passed: value < limit,
            value: Some(value),
            limit,
        }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            passed: value >= limit,
            value: Some(value),
            limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub feasible: bool,
    pub n_steps: usize,
    pub final_error: f64,
    pub max_base_displacement: f64,
    pub total_cost: f64,
    /// Grid points with at least one violated constraint.
    pub violating_points: usize,
    pub violated_families: Vec<String>,
    /// Largest step-to-step rise of the end-effector error over the second half.
    pub error_increase_final_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub rows: usize,
    pub final_error: f64,
    pub max_joint_error: f64,
    pub max_torques: Vec<f64>,
    pub clamp_steps: usize,
    pub max_linear_momentum: f64,
    pub max_angular_momentum: f64,
    pub error_increase_final_half: f64,
}

/// Largest `e[k+1] - e[k]` over the second half of the series, or 0.
pub fn error_increase_final_half(errors: &[f64]) -> f64 {
    let start = errors.len() / 2;
    errors[start..]
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
}

pub fn plan_summary(plan: &TrajectoryPlan) -> PlanSummary {
    let mut families: Vec<String> = Vec::new();
    for r in &plan.reports {
        for f in r.violated() {
            if !families.iter().any(|x| x == f) {
                families.push(f.to_string());
            }
        }
    }
    PlanSummary {
        feasible: plan.feasible,
        n_steps: plan.n_steps(),
        final_error: plan.final_error(),
        max_base_displacement: plan.max_base_displacement(),
        total_cost: plan.total_cost(),
        violating_points: plan.reports.iter().filter(|r| !r.all_passed()).count(),
        violated_families: families,
        error_increase_final_half: error_increase_final_half(&plan.errors()),
    }
}

pub fn tracking_summary(log: &TrackingLog) -> TrackingSummary {
    let (hl, ha) = log.max_momentum();
    TrackingSummary {
        rows: log.len(),
        final_error: log.final_error(),
        max_joint_error: log.max_joint_error(),
        max_torques: log.max_torques(),
        clamp_steps: log.clamp_count(),
        max_linear_momentum: hl,
        max_angular_momentum: ha,
        error_increase_final_half: error_increase_final_half(&log.ee_err),
    }
}

/// Acceptance checks for whatever stages produced results.
pub fn evaluate_checks(
    config: &ScenarioConfig,
    plan: Option<&PlanSummary>,
    tracking: Option<&TrackingSummary>,
    lyapunov: Option<&LyapunovReport>,
) -> Vec<Check> {
    let r_th = config.planner.r_th;
    let mut checks = Vec::new();
    match plan {
        Some(p) => {
            checks.push(Check::at_most("plan_constraints", p.violating_points as f64, 0.0));
            checks.push(Check::at_most("plan_final_error", p.final_error, r_th));
            checks.push(Check::at_most("plan_error_non_increasing", p.error_increase_final_half, 0.0));
        }
        None => checks.push(Check {
            name: "plan_constraints".into(),
            passed: false,
            value: None,
            limit: 0.0,
        }),
    }
    if let Some(t) = tracking {
        checks.push(Check::below("joint_error_bound", t.max_joint_error, MAX_JOINT_ERROR));
        let ratio = t
            .max_torques
            .iter()
            .zip(config.gains.tau_max.iter())
            .map(|(a, m)| a / m)
            .fold(0.0, f64::max);
        checks.push(Check::at_most("torque_limits", ratio, 1.0));
        checks.push(Check::at_most("final_error", t.final_error, r_th));
        checks.push(Check::at_most("tracking_error_non_increasing", t.error_increase_final_half, 0.0));
        checks.push(Check::at_most(
            "momentum",
            t.max_linear_momentum.max(t.max_angular_momentum),
            MOMENTUM_TOL,
        ));
    }
    if let Some(l) = lyapunov {
        checks.push(Check::at_least("lyapunov_reaching", l.decrease_fraction, LYAPUNOV_MIN_FRACTION));
        checks.push(Check {
            name: "lyapunov_sliding".into(),
            passed: l.sliding_passed(DECAY_REL_TOL),
            value: l.decay_relative_error(),
            limit: DECAY_REL_TOL,
        });
    }
    checks
}

/// Run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub case: String,
    pub stage: Stage,
    pub status: Status,
    pub message: Option<String>,
    pub seed: u64,
    pub r_d: [f64; 3],
    pub plan: Option<PlanSummary>,
    pub tracking: Option<TrackingSummary>,
    pub lyapunov: Option<LyapunovReport>,
    pub checks: Vec<Check>,
    pub wall_time_s: f64,
    pub files: Vec<String>,
    pub config: ScenarioFile,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.status == Status::Passed
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub plan: Option<TrajectoryPlan>,
    pub log: Option<TrackingLog>,
}

#[derive(Serialize)]
struct ConstraintFile<'a> {
    feasible: bool,
    message: Option<&'a str>,
    diagnostics: &'a [String],
    steps: &'a [ConstraintReport],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SmsError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| SmsError::io(path, e))
}

/// Runs `stage` of the scenario and writes its artifacts into `out`.
///
/// Infeasible plans and divergent tracking are reported through the returned summary; only
/// configuration and I/O problems are errors.
pub fn run_scenario(config: &ScenarioConfig, stage: Stage, out: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| SmsError::io(out, e))?;
    let mut summary = Summary {
        case: config.case().to_string(),
        stage,
        status: Status::Failed,
        message: None,
        seed: config.seed(),
        r_d: config.r_d.into(),
        plan: None,
        tracking: None,
        lyapunov: None,
        checks: Vec::new(),
        wall_time_s: 0.0,
        files: Vec::new(),
        config: config.file.clone(),
    };
    let mut outcome_log = None;

    let finish = |mut summary: Summary, plan, log, start: Instant| -> Result<RunOutcome> {
        summary.wall_time_s = start.elapsed().as_secs_f64();
        summary.files.push(MANIFEST_JSON.into());
        write_json(&out.join(MANIFEST_JSON), &summary)?;
        Ok(RunOutcome { summary, plan, log })
    };

    let plan = match plan_trajectory(&config.model, &config.initial, &config.r_d, &config.planner) {
        Ok(plan) => plan,
        Err(e @ SmsError::InfeasibleStep { .. }) => {
            let message = e.to_string();
            write_json(
                &out.join(CONSTRAINTS_JSON),
                &ConstraintFile {
                    feasible: false,
                    message: Some(&message),
                    diagnostics: &[],
                    steps: &[],
                },
            )?;
            summary.files.push(CONSTRAINTS_JSON.into());
            summary.status = Status::Infeasible;
            summary.message = Some(message);
            summary.checks = evaluate_checks(config, None, None, None);
            return finish(summary, None, None, start);
        }
        Err(e) => return Err(e),
    };
    write_plan_csv(&plan, &out.join(PLAN_CSV))?;
    write_json(
        &out.join(CONSTRAINTS_JSON),
        &ConstraintFile {
            feasible: plan.feasible,
            message: None,
            diagnostics: &plan.diagnostics,
            steps: &plan.reports,
        },
    )?;
    summary.files.extend([PLAN_CSV.to_string(), CONSTRAINTS_JSON.to_string()]);
    let plan_sum = plan_summary(&plan);
    if !plan.feasible {
        summary.status = Status::Infeasible;
        summary.message = Some(plan.diagnostics.join("; "));
    }

    let mut track_sum = None;
    let mut lyap = None;
    if stage != Stage::Plan && plan.feasible {
        match closed_loop_simulate_from(&config.model, &plan, &config.gains, &config.initial_error) {
            Ok(log) => {
                write_tracking_csv(&log, &out.join(TRACKING_CSV))?;
                summary.files.push(TRACKING_CSV.into());
                track_sum = Some(tracking_summary(&log));
                if stage == Stage::Run {
                    lyap = Some(lyapunov_check(&log, &config.gains));
                }
                outcome_log = Some(log);
            }
            Err(e @ SmsError::ControllerDivergence { .. }) => {
                summary.status = Status::Diverged;
                summary.message = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    summary.checks = evaluate_checks(config, Some(&plan_sum), track_sum.as_ref(), lyap.as_ref());
    if summary.message.is_none() {
        summary.status = if summary.checks.iter().all(|c| c.passed) {
            Status::Passed
        } else {
            Status::Failed
        };
    }
    summary.plan = Some(plan_sum);
    summary.tracking = track_sum;
    summary.lyapunov = lyap;
    finish(summary, Some(plan), outcome_log, start)
}

/// Result of re-deriving a run's manifest from its CSVs.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub summary: Summary,
    /// Recomputed acceptance checks.
    pub checks: Vec<Check>,
    /// Manifest values that disagree with the recomputation.
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.summary.passed() && self.checks.iter().all(|c| c.passed)
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) || (a.is_nan() && b.is_nan())
}

fn compare(mismatches: &mut Vec<String>, name: &str, manifest: f64, recomputed: f64) {
    if !close(manifest, recomputed) {
        mismatches.push(format!("{name}: manifest {manifest:e}, recomputed {recomputed:e}"));
    }
}

/// Re-derives the manifest numbers and checks of a run directory from its CSVs.
pub fn verify(run_dir: &Path) -> Result<VerifyReport> {
    let manifest_path = run_dir.join(MANIFEST_JSON);
    let text = fs::read_to_string(&manifest_path).map_err(|e| SmsError::io(&manifest_path, e))?;
    let summary: Summary = serde_json::from_str(&text).map_err(|e| SmsError::Parse {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let config = ScenarioConfig::resolve(summary.config.clone())?;
    let mut mismatches = Vec::new();

    let mut plan_sum = None;
    if let Some(expected) = &summary.plan {
        let mut plan = read_plan_csv(&run_dir.join(PLAN_CSV), config.r_d, config.planner.dt_plan)?;
        plan.reports = constraint_reports(&config.model, &plan, &config.planner);
        plan.feasible = plan.reports.iter().all(|r| r.all_passed());
        let got = plan_summary(&plan);
        if got.feasible != expected.feasible || got.violating_points != expected.violating_points {
            mismatches.push(format!(
                "plan feasibility: manifest {} ({} points), recomputed {} ({} points)",
                expected.feasible, expected.violating_points, got.feasible, got.violating_points
            ));
        }
        if got.n_steps != expected.n_steps {
            mismatches.push(format!("plan steps: manifest {}, recomputed {}", expected.n_steps, got.n_steps));
        }
        compare(&mut mismatches, "plan.final_error", expected.final_error, got.final_error);
        compare(
            &mut mismatches,
            "plan.max_base_displacement",
            expected.max_base_displacement,
            got.max_base_displacement,
        );
        compare(&mut mismatches, "plan.total_cost", expected.total_cost, got.total_cost);
        compare(
            &mut mismatches,
            "plan.error_increase_final_half",
            expected.error_increase_final_half,
            got.error_increase_final_half,
        );
        plan_sum = Some(got);
    }

    let mut track_sum = None;
    let mut lyap = None;
    if let Some(expected) = &summary.tracking {
        let log = read_tracking_csv(&run_dir.join(TRACKING_CSV), config.gains.dt_ctrl, config.gains.lambda)?;
        let got = tracking_summary(&log);
        if got.rows != expected.rows || got.clamp_steps != expected.clamp_steps {
            mismatches.push(format!(
                "tracking rows/clamps: manifest {}/{}, recomputed {}/{}",
                expected.rows, expected.clamp_steps, got.rows, got.clamp_steps
            ));
        }
        compare(&mut mismatches, "tracking.final_error", expected.final_error, got.final_error);
        compare(&mut mismatches, "tracking.max_joint_error", expected.max_joint_error, got.max_joint_error);
        for (i, (a, b)) in expected.max_torques.iter().zip(&got.max_torques).enumerate() {
            compare(&mut mismatches, &format!("tracking.max_torques[{i}]"), *a, *b);
        }
        compare(
            &mut mismatches,
            "tracking.max_linear_momentum",
            expected.max_linear_momentum,
            got.max_linear_momentum,
        );
        compare(
            &mut mismatches,
            "tracking.max_angular_momentum",
            expected.max_angular_momentum,
            got.max_angular_momentum,
        );
        if let Some(expected_l) = &summary.lyapunov {
            let got_l = lyapunov_check(&log, &config.gains);
            if got_l.outside_steps != expected_l.outside_steps || got_l.increasing_steps != expected_l.increasing_steps {
                mismatches.push(format!(
                    "lyapunov steps: manifest {}/{}, recomputed {}/{}",
                    expected_l.increasing_steps, expected_l.outside_steps, got_l.increasing_steps, got_l.outside_steps
                ));
            }
            compare(
                &mut mismatches,
                "lyapunov.decay_rate",
                expected_l.decay_rate.unwrap_or(f64::NAN),
                got_l.decay_rate.unwrap_or(f64::NAN),
            );
            lyap = Some(got_l);
        }
        track_sum = Some(got);
    }

    let checks = if summary.plan.is_some() {
        evaluate_checks(&config, plan_sum.as_ref(), track_sum.as_ref(), lyap.as_ref())
    } else {
        summary.checks.clone()
    };
    for (a, b) in summary.checks.iter().zip(&checks) {
        if a.name != b.name || a.passed != b.passed {
            mismatches.push(format!("check {}: manifest {}, recomputed {}", a.name, a.passed, b.passed));
        }
    }
    if summary.checks.len() != checks.len() {
        mismatches.push(format!(
            "check count: manifest {}, recomputed {}",
            summary.checks.len(),
            checks.len()
        ));
    }
    Ok(VerifyReport {
        summary,
        checks,
        mismatches,
    })
}

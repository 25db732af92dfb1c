//! Coupling-informed trajectory planning.
//!
//! The plan is built one grid step at a time. At step `k` the coupling analysis gives the
//! singular directions `V(k)` of `C_bm`; [`optimize_step`] picks the scaling vector `alpha`
//! whose joint velocity `V alpha` brings the assistance metric closest to `1 - H_norm`,
//! subject to the joint, collision and approach constraints. Joint angles follow the
//! trapezoid rule and the base pose is integrated from `C_bm qd` with `qd` linear over the
//! step, so the plan is exactly the motion the arm would induce under zero momentum.

mod constraints;
mod optimizer;

pub use constraints::{
    base_box_margin, check_constraints, clearance_pairs, collision_points, min_clearance, terminal_start,
    worst_base_margin, CollisionGeometry, ConstraintReport, FamilyResult, JointSample, LIMIT_TOL,
};
pub use optimizer::{
    optimize_step, step_cost, step_cost_from_metric, Candidate, Screen, StepChoice, StepProblem, COST_RESOLUTION,
};

use nalgebra::{DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::coupling::{coupling_matrix, DEFAULT_KAPPA};
use crate::dynamics::{attitude_rate, inertia_blocks};
use crate::error::{Result, SmsError};
use crate::kinematics::{forward_kinematics, link_jacobians};
use crate::model::{SmsModel, SmsState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub dt_plan: f64,
    /// Total horizon `T`, s.
    pub horizon: f64,
    pub kappa: f64,
    /// Joint limits in rad, rad/s, rad/s^2.
    pub q_max: DVector<f64>,
    pub qd_max: DVector<f64>,
    pub qdd_max: DVector<f64>,
    pub d_safe: f64,
    pub r_th: f64,
    pub terminal_window_fraction: f64,
    /// Clearance added to the base half-dimensions.
    pub base_margin: f64,
    /// Require every check point to clear the base along all three axes at once.
    pub literal_box_constraint: bool,
    /// Random scaling vectors drawn per step before refinement.
    pub candidates: usize,
    pub seed: u64,
    /// Coordinate-descent sweeps.
    pub sweeps: usize,
    /// Grid points per coordinate line search.
    pub line_points: usize,
    /// Desired approach speed is `approach_gain * (error - hold_radius)`, capped at `max_approach_speed`.
    pub approach_gain: f64,
    pub hold_radius: f64,
    pub max_approach_speed: f64,
    /// End-effector deceleration assumed when capping the approach speed near the goal, m/s^2.
    pub approach_decel: f64,
    /// Reject steps that would increase the end-effector error.
    pub monotone_approach: bool,
    /// RK4 sub-steps per plan step for the base pose.
    pub substeps: usize,
}

impl PlannerConfig {
    /// Reference limits for the three-link arm.
    pub fn reference() -> Self {
        let deg = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|d| d.to_radians()));
        PlannerConfig {
            dt_plan: 0.05,
            horizon: 10.0,
            kappa: DEFAULT_KAPPA,
            q_max: deg(&[81.0, 162.0, 162.0]),
            qd_max: deg(&[22.92; 3]),
            qdd_max: deg(&[28.65; 3]),
            d_safe: 0.01,
            r_th: 0.02,
            terminal_window_fraction: 0.1,
            base_margin: 0.005,
            literal_box_constraint: false,
            candidates: 200,
            seed: 0,
            sweeps: 3,
            line_points: 41,
            approach_gain: 1.0,
            hold_radius: 0.005,
            max_approach_speed: 0.2,
            approach_decel: 0.05,
            monotone_approach: true,
            substeps: 1,
        }
    }

    /// Number of plan steps `N = T / dt_plan`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt_plan).round() as usize
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SmsError::validation(name, format!("must be > 0, got {v}")))
            }
        };
        positive("dt_plan", self.dt_plan)?;
        positive("horizon", self.horizon)?;
        positive("kappa", self.kappa)?;
        positive("d_safe", self.d_safe)?;
        positive("r_th", self.r_th)?;
        positive("approach_gain", self.approach_gain)?;
        positive("max_approach_speed", self.max_approach_speed)?;
        positive("approach_decel", self.approach_decel)?;
        if !(self.base_margin >= 0.0) {
            return Err(SmsError::validation("base_margin", "must be >= 0"));
        }
        if !(self.hold_radius >= 0.0 && self.hold_radius < self.r_th) {
            return Err(SmsError::validation("hold_radius", "must lie in [0, r_th)"));
        }
        if !(self.terminal_window_fraction > 0.0 && self.terminal_window_fraction < 1.0) {
            return Err(SmsError::validation(
                "terminal_window_fraction",
                format!("must lie in (0, 1), got {}", self.terminal_window_fraction),
            ));
        }
        if self.steps() == 0 {
            return Err(SmsError::validation("horizon", "must cover at least one plan step"));
        }
        if self.substeps == 0 {
            return Err(SmsError::validation("substeps", "must be >= 1"));
        }
        if self.line_points < 3 {
            return Err(SmsError::validation("line_points", "must be >= 3"));
        }
        for (name, v) in [("q_max", &self.q_max), ("qd_max", &self.qd_max), ("qdd_max", &self.qdd_max)] {
            if v.len() != n {
                return Err(SmsError::validation(name, format!("expected {n} entries, got {}", v.len())));
            }
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0 && x.is_finite())) {
                return Err(SmsError::validation(format!("{name}[{i}]"), format!("must be > 0, got {x}")));
            }
        }
        Ok(())
    }
}

/// Per-step scalar metrics. The final grid point only carries `h_norm`; the rest are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub h_norm: f64,
    pub cos_theta_a: f64,
    pub c_tilde: f64,
    pub step_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub dt: f64,
    pub r_d: Vector3<f64>,
    pub t: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub qd: Vec<DVector<f64>>,
    /// Forward difference of `qd`; zero at the last grid point.
    pub qdd: Vec<DVector<f64>>,
    pub r_b: Vec<Vector3<f64>>,
    pub eps: Vec<Vector4<f64>>,
    pub v_b: Vec<Vector3<f64>>,
    pub w_b: Vec<Vector3<f64>>,
    pub r_e: Vec<Vector3<f64>>,
    /// Effective scaling vectors, one per step.
    pub alpha: Vec<DVector<f64>>,
    pub metrics: Vec<StepMetrics>,
    pub reports: Vec<ConstraintReport>,
    pub feasible: bool,
    pub diagnostics: Vec<String>,
}

impl TrajectoryPlan {
    pub fn n_steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn dof(&self) -> usize {
        self.q[0].len()
    }

    pub fn horizon(&self) -> f64 {
        self.t[self.n_steps()]
    }

    pub fn error(&self, k: usize) -> f64 {
        (self.r_d - self.r_e[k]).norm()
    }

    pub fn errors(&self) -> Vec<f64> {
        (0..self.t.len()).map(|k| self.error(k)).collect()
    }

    pub fn final_error(&self) -> f64 {
        self.error(self.n_steps())
    }

    /// Sum of the per-step costs.
    pub fn total_cost(&self) -> f64 {
        self.metrics[..self.n_steps()].iter().map(|m| m.step_cost).sum()
    }

    pub fn max_base_displacement(&self) -> f64 {
        self.r_b.iter().map(|r| (r - self.r_b[0]).norm()).fold(0.0, f64::max)
    }

    /// Full state at grid point `k`, base velocity included.
    pub fn state(&self, k: usize) -> SmsState {
        SmsState {
            r_b: self.r_b[k],
            eps: self.eps[k],
            q: self.q[k].clone(),
            v_b: self.v_b[k],
            w_b: self.w_b[k],
            qd: self.qd[k].clone(),
        }
    }

    /// Joint reference at time `t`: `qd` linear and `qdd` constant within each step, `q`
    /// its exact integral. Beyond the horizon the final point is held.
    pub fn reference(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n_steps = self.n_steps();
        if t >= self.horizon() {
            let n = self.dof();
            return (self.q[n_steps].clone(), self.qd[n_steps].clone(), DVector::zeros(n));
        }
        let k = ((t / self.dt).floor().max(0.0) as usize).min(n_steps - 1);
        let tau = (t - self.t[k]).max(0.0);
        let a = &self.qdd[k];
        let qd = &self.qd[k] + a * tau;
        let q = &self.q[k] + &self.qd[k] * tau + a * (0.5 * tau * tau);
        (q, qd, a.clone())
    }
}

/// Base pose rate `[r_b_dot, eps_dot]` induced by joint rates `qd` at `(r_b, eps, q)`.
fn pose_rate(
    model: &SmsModel,
    r_b: &Vector3<f64>,
    eps: &Vector4<f64>,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> Result<(Vector3<f64>, Vector4<f64>)> {
    let mut s = SmsState::at_rest(*r_b, *eps, q.clone());
    let cache = forward_kinematics(model, &s);
    let blocks = inertia_blocks(model, &cache, &link_jacobians(&cache));
    let twist = coupling_matrix(&blocks)? * qd;
    s.v_b = Vector3::new(twist[0], twist[1], twist[2]);
    s.w_b = Vector3::new(twist[3], twist[4], twist[5]);
    Ok((s.v_b, attitude_rate(&s, &cache.rot_b)))
}

/// Advances one plan step with joint rates linear from `state.qd` to `qd_next`.
///
/// Joint angles follow the trapezoid rule exactly; the base pose is integrated with RK4.
/// The returned state carries `qd_next` and a zero base velocity.
pub fn propagate_step(
    model: &SmsModel,
    state: &SmsState,
    qd_next: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> Result<SmsState> {
    let qd0 = &state.qd;
    let accel = (qd_next - qd0) / dt;
    let joints_at = |tau: f64| {
        let q = &state.q + qd0 * tau + &accel * (0.5 * tau * tau);
        let qd = qd0 + &accel * tau;
        (q, qd)
    };
    let h = dt / substeps as f64;
    let mut r_b = state.r_b;
    let mut eps = state.eps;
    for i in 0..substeps {
        let t0 = i as f64 * h;
        let stage = |dr: &Vector3<f64>, de: &Vector4<f64>, tau: f64| {
            let (q, qd) = joints_at(tau);
            pose_rate(model, &(r_b + dr), &(eps + de), &q, &qd)
        };
        let (r1, e1) = stage(&Vector3::zeros(), &Vector4::zeros(), t0)?;
        let (r2, e2) = stage(&(r1 * (h / 2.0)), &(e1 * (h / 2.0)), t0 + h / 2.0)?;
        let (r3, e3) = stage(&(r2 * (h / 2.0)), &(e2 * (h / 2.0)), t0 + h / 2.0)?;
        let (r4, e4) = stage(&(r3 * h), &(e3 * h), t0 + h)?;
        r_b += (r1 + 2.0 * r2 + 2.0 * r3 + r4) * (h / 6.0);
        eps += (e1 + 2.0 * e2 + 2.0 * e3 + e4) * (h / 6.0);
        eps /= eps.norm();
    }
    let q = &state.q + (qd0 + qd_next) * (0.5 * dt);
    let mut next = SmsState::at_rest(r_b, eps, q);
    next.qd = qd_next.clone();
    Ok(next)
}

/// Constraint report at every grid point of `plan`, from its stored joint and base samples.
pub fn constraint_reports(model: &SmsModel, plan: &TrajectoryPlan, config: &PlannerConfig) -> Vec<ConstraintReport> {
    let n_steps = plan.n_steps();
    (0..=n_steps)
        .map(|k| {
            let cache = forward_kinematics(model, &plan.state(k));
            let joints = JointSample {
                q: &plan.q[k],
                qd: &plan.qd[k],
                qdd: &plan.qdd[k],
            };
            check_constraints(model, &cache, &joints, &plan.r_d, k, n_steps, config)
        })
        .collect()
}

/// Plans from `initial` towards `r_d`. See [`plan_trajectory_observed`].
pub fn plan_trajectory(
    model: &SmsModel,
    initial: &SmsState,
    r_d: &Vector3<f64>,
    config: &PlannerConfig,
) -> Result<TrajectoryPlan> {
    plan_trajectory_observed(model, initial, r_d, config, &mut |_, _| {})
}

/// Plans from `initial` towards `r_d`, handing every step's problem and choice to `observer`.
///
/// The initial base velocity is ignored; base motion is always the momentum-free motion
/// induced by the joints. A step with no feasible candidate aborts with
/// [`SmsError::InfeasibleStep`]; a completed plan that misses any constraint is returned
/// with `feasible = false` and diagnostics.
pub fn plan_trajectory_observed(
    model: &SmsModel,
    initial: &SmsState,
    r_d: &Vector3<f64>,
    config: &PlannerConfig,
    observer: &mut dyn FnMut(&StepProblem<'_>, &StepChoice),
) -> Result<TrajectoryPlan> {
    let n = model.dof();
    initial.validate(model)?;
    config.validate(n)?;
    if r_d.iter().any(|v| !v.is_finite()) {
        return Err(SmsError::validation("r_d", "must be finite"));
    }
    let n_steps = config.steps();
    let dt = config.dt_plan;

    let mut plan = TrajectoryPlan {
        dt,
        r_d: *r_d,
        t: (0..=n_steps).map(|k| k as f64 * dt).collect(),
        q: Vec::with_capacity(n_steps + 1),
        qd: Vec::with_capacity(n_steps + 1),
        qdd: Vec::with_capacity(n_steps + 1),
        r_b: Vec::with_capacity(n_steps + 1),
        eps: Vec::with_capacity(n_steps + 1),
        v_b: Vec::with_capacity(n_steps + 1),
        w_b: Vec::with_capacity(n_steps + 1),
        r_e: Vec::with_capacity(n_steps + 1),
        alpha: Vec::with_capacity(n_steps),
        metrics: Vec::with_capacity(n_steps + 1),
        reports: Vec::with_capacity(n_steps + 1),
        feasible: true,
        diagnostics: Vec::new(),
    };

    let mut state = initial.clone();
    let mut warm: Option<DVector<f64>> = None;
    let mut velocity_saturated = 0usize;
    for k in 0..=n_steps {
        let problem = StepProblem::new(model, config, &state, r_d, k, n_steps)?;
        plan.q.push(problem.state.q.clone());
        plan.qd.push(problem.state.qd.clone());
        plan.r_b.push(problem.state.r_b);
        plan.eps.push(problem.state.eps);
        plan.v_b.push(problem.state.v_b);
        plan.w_b.push(problem.state.w_b);
        plan.r_e.push(problem.r_e);
        if k == n_steps {
            plan.metrics.push(StepMetrics {
                h_norm: problem.analysis.h_norm(),
                cos_theta_a: f64::NAN,
                c_tilde: f64::NAN,
                step_cost: f64::NAN,
            });
            break;
        }
        let choice = optimize_step(&problem, warm.as_ref())?;
        observer(&problem, &choice);
        if (0..n).any(|i| choice.candidate.qd[i].abs() >= config.qd_max[i] * (1.0 - 1e-12)) {
            velocity_saturated += 1;
        }
        plan.alpha.push(choice.candidate.alpha.clone());
        plan.metrics.push(StepMetrics {
            h_norm: problem.analysis.h_norm(),
            cos_theta_a: choice.candidate.metric.cos_theta_a,
            c_tilde: choice.candidate.metric.c_tilde,
            step_cost: choice.candidate.cost,
        });
        warm = Some(choice.alpha_raw.clone());
        state = choice.screen.next;
    }

    for k in 0..n_steps {
        plan.qdd.push((&plan.qd[k + 1] - &plan.qd[k]) / dt);
    }
    plan.qdd.push(DVector::zeros(n));

    plan.reports = constraint_reports(model, &plan, config);
    let failing: Vec<&ConstraintReport> = plan.reports.iter().filter(|r| !r.all_passed()).collect();
    if !failing.is_empty() {
        plan.feasible = false;
        plan.diagnostics.push(format!(
            "{} of {} grid points violate constraints",
            failing.len(),
            n_steps + 1
        ));
        for family in ["joint_angle", "joint_velocity", "joint_acceleration", "clearance", "base_box", "terminal"] {
            let hits: Vec<&&ConstraintReport> = failing.iter().filter(|r| r.violated().contains(&family)).collect();
            if let Some(first) = hits.first() {
                plan.diagnostics.push(format!("{family}: violated at {} grid points, first {first}", hits.len()));
            }
        }
        if velocity_saturated > 0 {
            plan.diagnostics.push(format!(
                "joint_velocity limit saturated at {velocity_saturated} of {n_steps} steps"
            ));
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_steps() {
        let c = PlannerConfig::reference();
        assert_eq!(c.steps(), 200);
        assert!(c.validate(3).is_ok());
        assert!((c.qd_max[0] - 0.4).abs() < 1e-3);
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = PlannerConfig::reference();
        c.qd_max[1] = 0.0;
        match c.validate(3).unwrap_err() {
            SmsError::Validation { field, .. } => assert_eq!(field, "qd_max[1]"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = PlannerConfig::reference();
        c.terminal_window_fraction = 1.0;
        assert!(c.validate(3).is_err());
    }

    #[test]
    fn zero_rates_leave_pose_unchanged() {
        let model = SmsModel::reference();
        let s = SmsState::reference_initial();
        let next = propagate_step(&model, &s, &DVector::zeros(3), 0.05, 1).unwrap();
        assert_eq!(next.r_b, s.r_b);
        assert_eq!(next.q, s.q);
    }

    #[test]
    fn propagation_keeps_center_of_mass() {
        let model = SmsModel::reference();
        let s = SmsState::reference_initial();
        let com0 = forward_kinematics(&model, &s).center_of_mass(&model);
        let mut cur = s.clone();
        for _ in 0..20 {
            let qd = DVector::from_vec(vec![0.3, -0.2, 0.25]);
            cur = propagate_step(&model, &cur, &qd, 0.05, 2).unwrap();
        }
        let com1 = forward_kinematics(&model, &cur).center_of_mass(&model);
        assert!((com1 - com0).norm() < 1e-9, "{}", (com1 - com0).norm());
        assert!((cur.r_b - s.r_b).norm() > 1e-3);
    }
}

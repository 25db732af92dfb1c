//! Sliding-mode tracking of a planned joint trajectory.
//!
//! The base is unactuated, so the joint subsystem sees the reduced inertia
//! `H_q = H_m - H_bm^T H_bb^-1 H_bm` and bias `C_q = c_m - H_bm^T H_bb^-1 c_b`. The torque law is
//! `tau = H_q (qdd_ref - Gamma qd_e) + C_q - K_s sat(s / lambda)` with `s = qd_e + Gamma q_e`,
//! clamped per joint. Closed-loop runs integrate the full equations of motion with the
//! torque held over each control step.

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::coupling::coupling_matrix;
use crate::dynamics::{integrate_step, momentum_from_blocks, DynamicsTerms, InertiaBlocks};
use crate::error::{Result, SmsError};
use crate::model::{SmsModel, SmsState};
use crate::planner::TrajectoryPlan;

/// `|q_e|` above which a run is declared divergent, rad.
pub const DIVERGENCE_LIMIT: f64 = 1.0;

/// Default tolerance on `dV_r/dt` outside the boundary layer.
pub const LYAPUNOV_RATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcGains {
    /// Sliding-surface slope, 1/s.
    pub gamma: DMatrix<f64>,
    /// Switching gain, N m.
    pub k_s: DMatrix<f64>,
    /// Boundary-layer width.
    pub lambda: f64,
    pub tau_max: DVector<f64>,
    pub dt_ctrl: f64,
}

impl SmcGains {
    /// Gains of the reference three-joint arm.
    pub fn reference() -> Self {
        SmcGains {
            gamma: DMatrix::from_diagonal_element(3, 3, 10.0),
            k_s: DMatrix::from_diagonal_element(3, 3, 0.001),
            lambda: 0.02,
            tau_max: DVector::from_vec(vec![3.5, 1.5, 1.5]),
            dt_ctrl: 1e-3,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_spd(&self.gamma, n, "gamma")?;
        check_spd(&self.k_s, n, "k_s")?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(SmsError::validation("lambda", format!("must be > 0, got {}", self.lambda)));
        }
        if self.tau_max.len() != n {
            return Err(SmsError::validation(
                "tau_max",
                format!("expected {n} entries, got {}", self.tau_max.len()),
            ));
        }
        for (i, &v) in self.tau_max.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SmsError::validation(format!("tau_max[{i}]"), format!("must be > 0, got {v}")));
            }
        }
        if !(self.dt_ctrl > 0.0 && self.dt_ctrl.is_finite()) {
            return Err(SmsError::validation("dt_ctrl", format!("must be > 0, got {}", self.dt_ctrl)));
        }
        Ok(())
    }

    /// Smallest eigenvalue of `Gamma`.
    pub fn gamma_min_eigenvalue(&self) -> f64 {
        self.gamma.clone().symmetric_eigenvalues().min()
    }
}

fn check_spd(m: &DMatrix<f64>, n: usize, field: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(SmsError::validation(
            field,
            format!("expected {n}x{n}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if (m - m.transpose()).iter().any(|v| v.abs() > 1e-12 * scale) {
        return Err(SmsError::validation(field, "must be symmetric"));
    }
    if m.iter().any(|v| !v.is_finite()) || m.clone().cholesky().is_none() {
        return Err(SmsError::validation(field, "must be positive definite"));
    }
    Ok(())
}

/// Joint-space dynamics with the base eliminated.
#[derive(Debug, Clone)]
pub struct ReducedDynamics {
    pub h_q: DMatrix<f64>,
    pub c_q: DVector<f64>,
}

/// Schur complement of the base block, from the inertia blocks and the full velocity-product vector.
pub fn reduced_dynamics(blocks: &InertiaBlocks, bias: &DVector<f64>) -> Result<ReducedDynamics> {
    let n = blocks.dof();
    if bias.len() != 6 + n {
        return Err(SmsError::InvalidState(format!(
            "velocity-product vector has {} entries, expected {}",
            bias.len(),
            6 + n
        )));
    }
    // C_bm = -H_bb^-1 H_bm, so H_bm^T H_bb^-1 X = -C_bm^T X.
    let c_bm = coupling_matrix(blocks)?;
    let c_bm_t = c_bm.transpose();
    let mut h_q = &blocks.h_m + &c_bm_t * blocks.coupling_block();
    h_q = (&h_q + h_q.transpose()) * 0.5;
    let c_q = bias.rows(6, n) + &c_bm_t * bias.rows(0, 6);
    Ok(ReducedDynamics { h_q, c_q })
}

/// `s = qd_e + Gamma q_e`.
pub fn sliding_surface(q_e: &DVector<f64>, qd_e: &DVector<f64>, gamma: &DMatrix<f64>) -> DVector<f64> {
    qd_e + gamma * q_e
}

/// Component-wise `clamp(s / lambda, -1, 1)`.
pub fn saturation(s: &DVector<f64>, lambda: f64) -> DVector<f64> {
    s.map(|v| (v / lambda).clamp(-1.0, 1.0))
}

/// `[0_6; tau_q]`.
pub fn generalized_torque(tau_q: &DVector<f64>) -> DVector<f64> {
    let n = tau_q.len();
    let mut tau = DVector::zeros(6 + n);
    tau.rows_mut(6, n).copy_from(tau_q);
    tau
}

/// Desired joint angle, rate and acceleration.
#[derive(Debug, Clone)]
pub struct JointReference {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl From<(DVector<f64>, DVector<f64>, DVector<f64>)> for JointReference {
    fn from((q, qd, qdd): (DVector<f64>, DVector<f64>, DVector<f64>)) -> Self {
        JointReference { q, qd, qdd }
    }
}

#[derive(Debug, Clone)]
pub struct ControlOutput {
    /// Applied torque after clamping.
    pub tau: DVector<f64>,
    /// Torque before clamping.
    pub raw: DVector<f64>,
    pub clamped: Vec<bool>,
    pub q_e: DVector<f64>,
    pub qd_e: DVector<f64>,
    pub s: DVector<f64>,
    pub reduced: ReducedDynamics,
}

impl ControlOutput {
    /// `V_r = s^T H_q s / 2`.
    pub fn v_r(&self) -> f64 {
        0.5 * self.s.dot(&(&self.reduced.h_q * &self.s))
    }

    /// `V_s = q_e^T q_e / 2`.
    pub fn v_s(&self) -> f64 {
        0.5 * self.q_e.norm_squared()
    }
}

/// Evaluates the torque law at `state` for an already evaluated set of dynamics terms.
pub fn control_torque_with(
    terms: &DynamicsTerms,
    state: &SmsState,
    reference: &JointReference,
    gains: &SmcGains,
) -> Result<ControlOutput> {
    let reduced = reduced_dynamics(&terms.blocks, &terms.bias)?;
    let q_e = &state.q - &reference.q;
    let qd_e = &state.qd - &reference.qd;
    let s = sliding_surface(&q_e, &qd_e, &gains.gamma);
    let switching = &gains.k_s * saturation(&s, gains.lambda);
    let raw = &reduced.h_q * (&reference.qdd - &gains.gamma * &qd_e) + &reduced.c_q - switching;
    let clamped: Vec<bool> = raw.iter().zip(gains.tau_max.iter()).map(|(t, m)| t.abs() > *m).collect();
    let tau = DVector::from_iterator(
        raw.len(),
        raw.iter().zip(gains.tau_max.iter()).map(|(t, m)| t.clamp(-m, *m)),
    );
    Ok(ControlOutput {
        tau,
        raw,
        clamped,
        q_e,
        qd_e,
        s,
        reduced,
    })
}

pub fn control_torque(
    model: &SmsModel,
    state: &SmsState,
    reference: &JointReference,
    gains: &SmcGains,
) -> Result<ControlOutput> {
    let terms = DynamicsTerms::evaluate(model, state);
    control_torque_with(&terms, state, reference, gains)
}

/// Initial deviation from the plan's first point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialError {
    pub q_e: DVector<f64>,
    /// `None` starts on the sliding surface, `qd_e = -Gamma q_e`.
    pub qd_e: Option<DVector<f64>>,
}

impl InitialError {
    pub fn zero(n: usize) -> Self {
        InitialError {
            q_e: DVector::zeros(n),
            qd_e: Some(DVector::zeros(n)),
        }
    }
}

/// Closed-loop records, one row per control step including `t = 0` and the final time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackingLog {
    pub dt: f64,
    pub lambda: f64,
    pub t: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub q_e: Vec<DVector<f64>>,
    pub qd_e: Vec<DVector<f64>>,
    pub s: Vec<DVector<f64>>,
    pub tau: Vec<DVector<f64>>,
    pub clamped: Vec<Vec<bool>>,
    pub ee_err: Vec<f64>,
    pub v_r: Vec<f64>,
    pub v_s: Vec<f64>,
    pub hl_norm: Vec<f64>,
    pub ha_norm: Vec<f64>,
    pub r_b: Vec<Vector3<f64>>,
    pub eps: Vec<Vector4<f64>>,
}

impl TrackingLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.q_e.first().map_or(0, |v| v.len())
    }

    pub fn final_error(&self) -> f64 {
        self.ee_err.last().copied().unwrap_or(f64::NAN)
    }

    pub fn max_joint_error(&self) -> f64 {
        self.q_e.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest absolute applied torque per joint.
    pub fn max_torques(&self) -> Vec<f64> {
        (0..self.dof())
            .map(|i| self.tau.iter().map(|t| t[i].abs()).fold(0.0, f64::max))
            .collect()
    }

    pub fn max_momentum(&self) -> (f64, f64) {
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        (max(&self.hl_norm), max(&self.ha_norm))
    }

    pub fn max_base_displacement(&self) -> f64 {
        self.r_b.iter().map(|r| (r - self.r_b[0]).norm()).fold(0.0, f64::max)
    }

    pub fn clamp_count(&self) -> usize {
        self.clamped.iter().filter(|c| c.iter().any(|&b| b)).count()
    }
}

/// Tracks `plan` from its first point with no initial error.
pub fn closed_loop_simulate(model: &SmsModel, plan: &TrajectoryPlan, gains: &SmcGains) -> Result<TrackingLog> {
    closed_loop_simulate_from(model, plan, gains, &InitialError::zero(model.dof()))
}

/// Tracks `plan` starting `initial` away from its first point.
///
/// The base starts with the momentum-free velocity of the perturbed joint rates. Each step
/// applies `[0_6; tau]` held constant over `dt_ctrl`.
pub fn closed_loop_simulate_from(
    model: &SmsModel,
    plan: &TrajectoryPlan,
    gains: &SmcGains,
    initial: &InitialError,
) -> Result<TrackingLog> {
    let n = model.dof();
    gains.validate(n)?;
    if plan.dof() != n {
        return Err(SmsError::InvalidState(format!(
            "plan has {} joints, model has {n}",
            plan.dof()
        )));
    }
    if gains.dt_ctrl > plan.dt * (1.0 + 1e-12) {
        return Err(SmsError::validation(
            "dt_ctrl",
            format!("must not exceed the plan step {}, got {}", plan.dt, gains.dt_ctrl),
        ));
    }
    if initial.q_e.len() != n || initial.qd_e.as_ref().is_some_and(|v| v.len() != n) {
        return Err(SmsError::validation("initial_error", format!("expected {n} entries")));
    }

    let mut state = plan.state(0);
    state.q += &initial.q_e;
    let qd_e0 = initial.qd_e.clone().unwrap_or_else(|| -(&gains.gamma * &initial.q_e));
    state.qd += &qd_e0;
    {
        let terms = DynamicsTerms::evaluate(model, &state);
        let twist = coupling_matrix(&terms.blocks)? * &state.qd;
        state.v_b = Vector3::new(twist[0], twist[1], twist[2]);
        state.w_b = Vector3::new(twist[3], twist[4], twist[5]);
    }

    let dt = gains.dt_ctrl;
    let steps = (plan.horizon() / dt + 1e-9).floor() as usize;
    let mut log = TrackingLog {
        dt,
        lambda: gains.lambda,
        ..TrackingLog::default()
    };
    for i in 0..=steps {
        let t = i as f64 * dt;
        let reference = JointReference::from(plan.reference(t));
        let terms = DynamicsTerms::evaluate(model, &state);
        let out = control_torque_with(&terms, &state, &reference, gains)?;
        let err_norm = out.q_e.norm();
        if !(err_norm <= DIVERGENCE_LIMIT) {
            return Err(SmsError::ControllerDivergence { t, norm: err_norm });
        }
        let (h_l, h_a) = momentum_from_blocks(&terms.blocks, &state);
        log.t.push(t);
        log.q.push(state.q.clone());
        log.v_r.push(out.v_r());
        log.v_s.push(out.v_s());
        log.ee_err.push((plan.r_d - terms.cache.r_e).norm());
        log.hl_norm.push(h_l.norm());
        log.ha_norm.push(h_a.norm());
        log.r_b.push(state.r_b);
        log.eps.push(state.eps);
        if i < steps {
            state = integrate_step(model, &state, &generalized_torque(&out.tau), dt)?;
        }
        log.q_e.push(out.q_e);
        log.qd_e.push(out.qd_e);
        log.s.push(out.s);
        log.tau.push(out.tau);
        log.clamped.push(out.clamped);
    }
    Ok(log)
}

/// Numerical check of the reaching- and sliding-phase Lyapunov arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// Steps with some `|s_i| > lambda`.
    pub outside_steps: usize,
    /// Of those, steps where `dV_r/dt` exceeded `tolerance`.
    pub increasing_steps: usize,
    /// `1 - increasing / outside`; 1 when no step is outside the layer.
    pub decrease_fraction: f64,
    pub tolerance: f64,
    /// Largest `dV_r/dt + s^T K_s sat(s/lambda)` over unclamped steps.
    pub max_inequality_residual: f64,
    /// Points used in the decay fit.
    pub sliding_points: usize,
    /// Fitted decay rate of `V_s`, 1/s.
    pub decay_rate: Option<f64>,
    /// `2 min eig(Gamma)`.
    pub predicted_rate: f64,
}

impl LyapunovReport {
    pub fn reaching_passed(&self, min_fraction: f64) -> bool {
        self.decrease_fraction >= min_fraction
    }

    /// Relative error of the fitted decay rate.
    pub fn decay_relative_error(&self) -> Option<f64> {
        self.decay_rate.map(|r| (r - self.predicted_rate).abs() / self.predicted_rate)
    }

    /// Passes when no fit was possible.
    pub fn sliding_passed(&self, rel_tol: f64) -> bool {
        self.decay_relative_error().is_none_or(|e| e <= rel_tol)
    }
}

/// Sliding segments must be at least this many points long.
const MIN_SEGMENT: usize = 10;
/// A point is on the surface when `|s| < lambda / 10` and `|s| <= SURFACE_DOMINANCE |Gamma q_e|`,
/// so that `q_e` evolves by `qd_e = -Gamma q_e` to within a few percent.
const SURFACE_DOMINANCE: f64 = 0.02;

pub fn lyapunov_check(log: &TrackingLog, gains: &SmcGains) -> LyapunovReport {
    lyapunov_check_with(log, gains, LYAPUNOV_RATE_TOL)
}

pub fn lyapunov_check_with(log: &TrackingLog, gains: &SmcGains, tolerance: f64) -> LyapunovReport {
    let dt = log.dt;
    let lambda = gains.lambda;
    let mut outside = 0;
    let mut increasing = 0;
    let mut residual = f64::NEG_INFINITY;
    for k in 0..log.len().saturating_sub(1) {
        let rate = (log.v_r[k + 1] - log.v_r[k]) / dt;
        let s = &log.s[k];
        if s.iter().any(|v| v.abs() > lambda) {
            outside += 1;
            if rate > tolerance {
                increasing += 1;
            }
        }
        if !log.clamped[k].iter().any(|&c| c) {
            let dissipation = s.dot(&(&gains.k_s * saturation(s, lambda)));
            residual = residual.max(rate + dissipation);
        }
    }
    let decrease_fraction = if outside == 0 {
        1.0
    } else {
        1.0 - increasing as f64 / outside as f64
    };

    // Pooled least-squares slope of ln V_s with a separate intercept per segment.
    let mut segments: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    for k in 0..log.len() {
        let s_norm = log.s[k].norm();
        let pull = (&gains.gamma * &log.q_e[k]).norm();
        let on_surface = s_norm < lambda / 10.0 && s_norm <= SURFACE_DOMINANCE * pull && log.v_s[k] > 0.0;
        if on_surface {
            current.push((log.t[k], log.v_s[k].ln()));
        } else if !current.is_empty() {
            segments.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        segments.push(current);
    }
    let (mut sxy, mut sxx, mut points) = (0.0, 0.0, 0);
    for seg in segments.iter().filter(|s| s.len() >= MIN_SEGMENT) {
        let m = seg.len() as f64;
        let tm = seg.iter().map(|p| p.0).sum::<f64>() / m;
        let ym = seg.iter().map(|p| p.1).sum::<f64>() / m;
        for &(t, y) in seg {
            sxy += (t - tm) * (y - ym);
            sxx += (t - tm) * (t - tm);
        }
        points += seg.len();
    }
    let decay_rate = (points > 0 && sxx > 0.0).then(|| -sxy / sxx);

    LyapunovReport {
        outside_steps: outside,
        increasing_steps: increasing,
        decrease_fraction,
        tolerance,
        max_inequality_residual: if residual.is_finite() { residual } else { 0.0 },
        sliding_points: points,
        decay_rate,
        predicted_rate: 2.0 * gains.gamma_min_eigenvalue(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, link_jacobians};
    use crate::dynamics::{coriolis_vector, inertia_blocks};

    fn blocks_at(model: &SmsModel, state: &SmsState) -> InertiaBlocks {
        let cache = forward_kinematics(model, state);
        inertia_blocks(model, &cache, &link_jacobians(&cache))
    }

    fn moving_state() -> SmsState {
        let mut s = SmsState::reference_initial();
        s.q = DVector::from_vec(vec![0.4, -0.7, 1.1]);
        s.qd = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        s.v_b = Vector3::new(0.01, -0.02, 0.0);
        s.w_b = Vector3::new(0.0, 0.0, 0.05);
        s
    }

    #[test]
    fn schur_complement_matches_direct_formula() {
        let model = SmsModel::reference();
        let state = moving_state();
        let blocks = blocks_at(&model, &state);
        let bias = coriolis_vector(&model, &state);
        let red = reduced_dynamics(&blocks, &bias).unwrap();

        let hbb = DMatrix::from_iterator(6, 6, blocks.base_block().iter().cloned());
        let hbm = blocks.coupling_block();
        let inv = hbb.try_inverse().unwrap();
        let h_direct = &blocks.h_m - hbm.transpose() * &inv * &hbm;
        let c_direct = bias.rows(6, 3) - hbm.transpose() * &inv * bias.rows(0, 6);
        assert!((&red.h_q - h_direct).amax() < 1e-12);
        assert!((&red.c_q - c_direct).amax() < 1e-12);
        assert!((&red.h_q - red.h_q.transpose()).amax() < 1e-10);
    }

    #[test]
    fn sliding_surface_examples() {
        let gamma = DMatrix::from_diagonal_element(3, 3, 10.0);
        let z = DVector::zeros(3);
        assert_eq!(sliding_surface(&z, &z, &gamma), z);
        let q_e = DVector::from_vec(vec![0.1, 0.0, 0.0]);
        let s = sliding_surface(&q_e, &z, &gamma);
        assert!((s - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn saturation_branches() {
        let s = DVector::from_vec(vec![0.04, 0.01, -0.04, -0.01]);
        let sat = saturation(&s, 0.02);
        assert_eq!(sat[0], 1.0);
        assert!((sat[1] - 0.5).abs() < 1e-15);
        assert_eq!(sat[2], -1.0);
        assert!((sat[3] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn feedforward_only_at_zero_error() {
        let model = SmsModel::reference();
        let state = moving_state();
        let reference = JointReference {
            q: state.q.clone(),
            qd: state.qd.clone(),
            qdd: DVector::from_vec(vec![0.3, -0.2, 0.1]),
        };
        let gains = SmcGains::reference();
        let out = control_torque(&model, &state, &reference, &gains).unwrap();
        let expected = &out.reduced.h_q * &reference.qdd + &out.reduced.c_q;
        assert!((&out.raw - expected).amax() < 1e-15);
        assert!(out.clamped.iter().all(|c| !c));
        assert_eq!(out.v_r(), 0.0);
        assert_eq!(out.v_s(), 0.0);
    }

    #[test]
    fn torques_clamped() {
        let model = SmsModel::reference();
        let state = moving_state();
        let reference = JointReference {
            q: state.q.clone(),
            qd: state.qd.clone(),
            qdd: DVector::from_vec(vec![500.0, -500.0, 500.0]),
        };
        let gains = SmcGains::reference();
        let out = control_torque(&model, &state, &reference, &gains).unwrap();
        assert!(out.clamped.iter().all(|&c| c));
        for i in 0..3 {
            assert!(out.tau[i].abs() <= gains.tau_max[i]);
        }
        let full = generalized_torque(&out.tau);
        assert!(full.rows(0, 6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gains_validation_names_field() {
        let mut g = SmcGains::reference();
        g.tau_max[1] = -1.0;
        match g.validate(3) {
            Err(SmsError::Validation { field, .. }) => assert_eq!(field, "tau_max[1]"),
            other => panic!("unexpected {other:?}"),
        }
        let mut g = SmcGains::reference();
        g.gamma[(0, 1)] = 1.0;
        assert!(g.validate(3).is_err());
    }
}

//! Per-step selection of the scaling vector.
//!
//! Search runs in raw `alpha` space. Each raw vector maps to a joint velocity `V alpha`,
//! which is clipped into the box allowed by the velocity, acceleration and joint-angle
//! limits; the effective scaling vector is `V^T qd` of the clipped velocity and the cost is
//! evaluated there. Feasibility screening needs a pose propagation, so candidates are screened
//! lazily in order of increasing cost.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::constraints::{clearance_pairs, min_clearance, worst_base_margin, LIMIT_TOL};
use super::{propagate_step, PlannerConfig};
use crate::coupling::{assist_metric, pseudo_inverse, AssistMetric, CouplingAnalysis, AT_GOAL_DISTANCE};
use crate::dynamics::inertia_blocks;
use crate::error::{Result, SmsError};
use crate::kinematics::{forward_kinematics, link_jacobians};
use crate::model::{SmsModel, SmsState};

/// Smallest scale applied to the chosen velocity; keeps the direction defined when stopping.
const MIN_SCALE: f64 = 1e-6;

/// Candidates screened per coordinate line search.
const SCREEN_BUDGET: usize = 8;

/// Random segment end points per step for the residual-zero search.
const RAY_SAMPLES: usize = 48;

/// Relative singular-value cutoff for the preferred-velocity pseudo-inverse.
const PREFERRED_RTOL: f64 = 1e-6;

/// Costs closer than this are treated as equal and ranked by joint effort instead.
pub const COST_RESOLUTION: f64 = 1e-14;

/// `(C_tilde - (1 - H_norm))^2`.
pub fn step_cost_from_metric(c_tilde: f64, h_norm: f64) -> f64 {
    let r = c_tilde - (1.0 - h_norm);
    r * r
}

/// Step cost of the raw joint velocity `V alpha` at the analysed configuration.
pub fn step_cost(
    alpha: &DVector<f64>,
    analysis: &CouplingAnalysis,
    r_e: &Vector3<f64>,
    r_d: &Vector3<f64>,
    kappa: f64,
) -> Result<f64> {
    let qd = crate::coupling::coupled_joint_velocity(alpha, &analysis.svd.v)?;
    let metric = assist_metric(&qd, analysis.j_star(), r_e, r_d, kappa);
    Ok(step_cost_from_metric(metric.c_tilde, analysis.h_norm()))
}

/// A joint velocity together with its cost.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// Effective scaling vector `V^T qd`.
    pub alpha: DVector<f64>,
    pub qd: DVector<f64>,
    pub metric: AssistMetric,
    pub cost: f64,
    /// Limit-weighted joint speed per unit end-effector speed; the tie-break between equal costs.
    pub effort: f64,
}

impl Candidate {
    fn rank(&self) -> (i64, f64) {
        ((self.cost / COST_RESOLUTION).floor() as i64, self.effort)
    }

    /// Strict improvement over `other` in (quantized cost, effort) order.
    pub fn better_than(&self, other: &Candidate) -> bool {
        by_rank(self, other) == Ordering::Less
    }
}

/// Result of screening a candidate against the constraints at the next grid point.
#[derive(Debug, Clone)]
pub struct Screen {
    pub feasible: bool,
    /// Sum of constraint violations; zero when feasible.
    pub violation: f64,
    pub reasons: Vec<&'static str>,
    pub next: SmsState,
    pub next_error: f64,
}

#[derive(Debug, Clone)]
pub struct StepChoice {
    /// Raw search point, kept as the next step's warm start.
    pub alpha_raw: DVector<f64>,
    pub candidate: Candidate,
    pub screen: Screen,
}

/// Everything needed to evaluate candidates at one grid point.
pub struct StepProblem<'a> {
    pub model: &'a SmsModel,
    pub config: &'a PlannerConfig,
    pub step: usize,
    pub n_steps: usize,
    /// State at the grid point, base velocity set to `C_bm qd`.
    pub state: SmsState,
    pub analysis: CouplingAnalysis,
    pub r_e: Vector3<f64>,
    pub r_d: Vector3<f64>,
    pub error: f64,
    /// Joint-velocity box for the next grid point.
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    /// Joint velocity driving the end effector straight at the goal at the desired speed,
    /// from a pseudo-inverse that penalizes joints near their limits.
    pub preferred: DVector<f64>,
}

impl<'a> StepProblem<'a> {
    pub fn new(
        model: &'a SmsModel,
        config: &'a PlannerConfig,
        state: &SmsState,
        r_d: &Vector3<f64>,
        step: usize,
        n_steps: usize,
    ) -> Result<Self> {
        let cache = forward_kinematics(model, state);
        let jac = link_jacobians(&cache);
        let blocks = inertia_blocks(model, &cache, &jac);
        let analysis = CouplingAnalysis::new(&blocks, &jac)?;
        let mut state = state.clone();
        let twist = &analysis.c_bm * &state.qd;
        state.v_b = Vector3::new(twist[0], twist[1], twist[2]);
        state.w_b = Vector3::new(twist[3], twist[4], twist[5]);

        let n = model.dof();
        let dt = config.dt_plan;
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let dv = config.qdd_max[i] * dt;
            // q_next = q + dt/2 (qd + qd_next) must stay within the angle limit.
            let angle_lo = 2.0 * (-config.q_max[i] - state.q[i]) / dt - state.qd[i];
            let angle_hi = 2.0 * (config.q_max[i] - state.q[i]) / dt - state.qd[i];
            lo[i] = (-config.qd_max[i]).max(state.qd[i] - dv).max(angle_lo);
            hi[i] = config.qd_max[i].min(state.qd[i] + dv).min(angle_hi);
        }
        let r_e = cache.r_e;
        let error = (r_d - r_e).norm();
        let mut problem = StepProblem {
            model,
            config,
            step,
            n_steps,
            state,
            analysis,
            r_e,
            r_d: *r_d,
            error,
            lo,
            hi,
            preferred: DVector::zeros(n),
        };
        problem.preferred = problem.preferred_velocity();
        Ok(problem)
    }

    /// Joint speed, weighted up for joints moving towards a nearby limit, per unit end-effector speed.
    fn effort(&self, qd: &DVector<f64>) -> f64 {
        let ee_speed = self.analysis.end_effector_velocity(qd).norm();
        if !(ee_speed > 0.0) {
            return f64::INFINITY;
        }
        let q = &self.state.q;
        let weighted: f64 = (0..qd.len())
            .map(|i| {
                let w = if q[i] * qd[i] > 0.0 { 1.0 / limit_room(q[i], self.config.q_max[i]) } else { 1.0 };
                w * qd[i] * qd[i]
            })
            .sum();
        weighted.sqrt() / ee_speed
    }

    fn preferred_velocity(&self) -> DVector<f64> {
        let n = self.model.dof();
        if self.error <= AT_GOAL_DISTANCE {
            return DVector::zeros(n);
        }
        let q = &self.state.q;
        let scale = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| limit_room(q[i], self.config.q_max[i]).sqrt()));
        let j_t = self.analysis.j_star().rows(0, 3) * &scale;
        let (pinv, _) = pseudo_inverse(&j_t, PREFERRED_RTOL);
        let v_des = (self.r_d - self.r_e) * (self.desired_speed() / self.error);
        scale * pinv * DVector::from_column_slice(v_des.as_slice())
    }

    fn box_empty(&self) -> bool {
        self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l > h)
    }

    /// Candidate for a raw scaling vector.
    pub fn evaluate(&self, alpha_raw: &DVector<f64>) -> Candidate {
        let raw = &self.analysis.svd.v * alpha_raw;
        let qd = DVector::from_fn(raw.len(), |i, _| raw[i].max(self.lo[i]).min(self.hi[i]));
        self.evaluate_velocity(qd)
    }

    /// Candidate for an explicit next-step joint velocity.
    pub fn evaluate_velocity(&self, qd: DVector<f64>) -> Candidate {
        let alpha = self.analysis.svd.v.transpose() * &qd;
        let metric = assist_metric(&qd, self.analysis.j_star(), &self.r_e, &self.r_d, self.config.kappa);
        Candidate {
            alpha,
            cost: step_cost_from_metric(metric.c_tilde, self.analysis.h_norm()),
            effort: self.effort(&qd),
            qd,
            metric,
        }
    }

    /// Propagates the candidate one step and checks every constraint at the next grid point.
    pub fn screen(&self, cand: &Candidate) -> Result<Screen> {
        let cfg = self.config;
        let dt = cfg.dt_plan;
        let next = propagate_step(self.model, &self.state, &cand.qd, dt, cfg.substeps)?;
        let cache = forward_kinematics(self.model, &next);
        let mut violation = 0.0;
        let mut reasons = Vec::new();
        let mut flag = |name: &'static str, amount: f64| {
            if amount > 0.0 {
                violation += amount;
                if !reasons.contains(&name) {
                    reasons.push(name);
                }
            }
        };

        if self.box_empty() {
            flag("joint_angle", 1.0);
        }
        for i in 0..cand.qd.len() {
            let v = cand.qd[i];
            flag("joint_velocity", v.abs() - cfg.qd_max[i] - LIMIT_TOL);
            flag("joint_acceleration", (v - self.state.qd[i]).abs() / dt - cfg.qdd_max[i] - LIMIT_TOL);
            flag("alpha_bounds", cand.alpha[i].abs() - 1.0);
            // Travel needed to stop at the maximum deceleration.
            let stop = v * v / (2.0 * cfg.qdd_max[i]) + v.abs() * dt / 2.0;
            flag("joint_angle", (next.q[i] + v.signum() * stop).abs() - cfg.q_max[i]);
        }

        let points = cache.check_points();
        let (dmin, _) = min_clearance(&points, &clearance_pairs(self.model.dof()));
        flag("clearance", cfg.d_safe - dmin);
        let (box_margin, _) = worst_base_margin(
            &cache,
            &points,
            &self.model.base().dims,
            cfg.base_margin,
            cfg.literal_box_constraint,
        );
        flag("base_box", if box_margin > 0.0 { 0.0 } else { f64::EPSILON - box_margin });

        let next_error = (self.r_d - cache.r_e).norm();
        if cfg.monotone_approach {
            flag("approach", next_error - self.error);
        }
        Ok(Screen {
            feasible: violation == 0.0,
            violation,
            reasons,
            next,
            next_error,
        })
    }

    /// Scale range `[s_lo, s_hi]` keeping `s * qd` inside the velocity box and `alpha` bounds.
    fn scale_range(&self, qd: &DVector<f64>) -> (f64, f64) {
        let mut s_lo = 0.0f64;
        let mut s_hi = f64::INFINITY;
        for i in 0..qd.len() {
            let v = qd[i];
            if v.abs() < f64::MIN_POSITIVE {
                continue;
            }
            let (a, b) = (self.lo[i] / v, self.hi[i] / v);
            s_lo = s_lo.max(a.min(b));
            s_hi = s_hi.min(a.max(b));
        }
        let alpha = self.analysis.svd.v.transpose() * qd;
        let amax = alpha.amax();
        if amax > 0.0 {
            s_hi = s_hi.min(1.0 / amax);
        }
        (s_lo, s_hi)
    }

    /// Approach speed the magnitude stage aims for.
    fn desired_speed(&self) -> f64 {
        let cfg = self.config;
        let gap = (self.error - cfg.hold_radius).max(0.0);
        (cfg.approach_gain * gap)
            .min((2.0 * cfg.approach_decel * gap).sqrt())
            .min(cfg.max_approach_speed)
    }
}

/// `1 - (q / q_max)^2`, floored so the weights stay bounded.
fn limit_room(q: f64, q_max: f64) -> f64 {
    (1.0 - (q / q_max).powi(2)).max(0.01)
}

fn by_rank(a: &Candidate, b: &Candidate) -> Ordering {
    let (ra, rb) = (a.rank(), b.rank());
    ra.0.cmp(&rb.0).then(ra.1.total_cmp(&rb.1))
}

/// Screens `cands` in rank order and returns the best feasible one that improves on `incumbent`.
fn first_feasible(
    problem: &StepProblem<'_>,
    cands: Vec<(DVector<f64>, Candidate)>,
    budget: usize,
    incumbent: Option<&Candidate>,
) -> Result<Option<(DVector<f64>, Candidate, Screen)>> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| by_rank(&cands[a].1, &cands[b].1).then(a.cmp(&b)));
    for &i in order.iter().take(budget) {
        let (raw, cand) = &cands[i];
        if incumbent.is_some_and(|inc| !cand.better_than(inc)) {
            break;
        }
        let screen = problem.screen(cand)?;
        if screen.feasible {
            return Ok(Some((raw.clone(), cand.clone(), screen)));
        }
    }
    Ok(None)
}

fn residual(problem: &StepProblem<'_>, c: &Candidate) -> f64 {
    c.metric.c_tilde - (1.0 - problem.analysis.h_norm())
}

/// Line search along coordinate `i` within `[center - width, center + width] ∩ [-1, 1]`.
fn line_candidates(
    problem: &StepProblem<'_>,
    base: &DVector<f64>,
    i: usize,
    width: f64,
) -> Vec<(DVector<f64>, Candidate)> {
    let lo = (base[i] - width).max(-1.0);
    let hi = (base[i] + width).min(1.0);
    let m = problem.config.line_points;
    let at = |x: f64| {
        let mut a = base.clone();
        a[i] = x;
        let c = problem.evaluate(&a);
        (a, c)
    };
    let mut out: Vec<(DVector<f64>, Candidate)> =
        (0..m).map(|j| at(lo + (hi - lo) * j as f64 / (m - 1) as f64)).collect();

    // Exact zeros of the residual between sign changes.
    let mut roots = Vec::new();
    for w in out.windows(2) {
        let (ra, rb) = (residual(problem, &w[0].1), residual(problem, &w[1].1));
        if ra == 0.0 || ra.signum() == rb.signum() {
            continue;
        }
        let (mut a, mut b, mut fa) = (w[0].0[i], w[1].0[i], ra);
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            let (_, c) = at(mid);
            let fm = residual(problem, &c);
            if fm == 0.0 {
                a = mid;
                b = mid;
                break;
            }
            if fm.signum() == fa.signum() {
                a = mid;
                fa = fm;
            } else {
                b = mid;
            }
        }
        roots.push(at(if fa.abs() <= residual(problem, &at(b).1).abs() { a } else { b }));
    }

    // Golden-section refinement around the best grid point.
    if let Some(best) = (0..out.len()).min_by(|&a, &b| out[a].1.cost.total_cmp(&out[b].1.cost).then(a.cmp(&b))) {
        let step = (hi - lo) / (m - 1) as f64;
        let (mut a, mut b) = ((out[best].0[i] - step).max(lo), (out[best].0[i] + step).min(hi));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = at(x1).1.cost;
        let mut f2 = at(x2).1.cost;
        for _ in 0..40 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = at(x1).1.cost;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = at(x2).1.cost;
            }
        }
        out.push(at(0.5 * (a + b)));
    }
    out.extend(roots);
    out
}

/// Zeros of the cost residual on segments from the box point nearest the preferred velocity
/// to seeded points of the velocity box. These land on the zero-cost set close to the
/// preferred velocity, which coordinate moves in raw `alpha` cannot slide along.
fn ray_candidates(problem: &StepProblem<'_>, rng: &mut ChaCha8Rng) -> Vec<(DVector<f64>, Candidate)> {
    let n = problem.model.dof();
    if problem.box_empty() {
        return Vec::new();
    }
    let clip = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[i].max(problem.lo[i]).min(problem.hi[i]));
    let anchor = clip(&problem.preferred);
    let anchor_c = problem.evaluate_velocity(anchor.clone());
    let ra = residual(problem, &anchor_c);
    let mut targets: Vec<DVector<f64>> = Vec::with_capacity(RAY_SAMPLES + (1 << n.min(6)));
    if n <= 6 {
        for mask in 0..(1usize << n) {
            targets.push(DVector::from_fn(n, |i, _| {
                if mask >> i & 1 == 1 {
                    problem.hi[i]
                } else {
                    problem.lo[i]
                }
            }));
        }
    }
    for _ in 0..RAY_SAMPLES {
        targets.push(DVector::from_fn(n, |i, _| {
            let u: f64 = rng.gen_range(0.0..=1.0);
            problem.lo[i] + u * (problem.hi[i] - problem.lo[i])
        }));
    }
    let mut out = Vec::new();
    for target in targets {
        let tc = problem.evaluate_velocity(target.clone());
        let rt = residual(problem, &tc);
        if ra == 0.0 || rt == 0.0 || ra.signum() == rt.signum() {
            continue;
        }
        let point = |t: f64| &anchor + (&target - &anchor) * t;
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            let rm = residual(problem, &problem.evaluate_velocity(point(mid)));
            if rm == 0.0 {
                a = mid;
                b = mid;
                break;
            }
            if rm.signum() == ra.signum() {
                a = mid;
            } else {
                b = mid;
            }
        }
        let qd = point(0.5 * (a + b));
        let c = problem.evaluate_velocity(qd);
        if c.alpha.iter().all(|v| v.abs() <= 1.0) {
            out.push((c.alpha.clone(), c));
        }
    }
    out
}

/// Picks the scaling vector for one step: seeded sampling, coordinate descent, a residual-zero
/// search near the preferred velocity, then a cost-preserving rescale of the joint velocity.
/// Among candidates of equal cost the one nearest the preferred velocity wins.
pub fn optimize_step(problem: &StepProblem<'_>, warm: Option<&DVector<f64>>) -> Result<StepChoice> {
    let cfg = problem.config;
    let n = problem.model.dof();
    let stream = (problem.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream);

    let mut seeds: Vec<DVector<f64>> = Vec::with_capacity(cfg.candidates + 2);
    if let Some(w) = warm {
        seeds.push(w.clone());
    }
    let vt = problem.analysis.svd.v.transpose();
    let hold = &vt * &problem.state.qd;
    seeds.push(hold.map(|a| a.clamp(-1.0, 1.0)));
    let brake = DVector::from_fn(n, |i, _| 0f64.max(problem.lo[i]).min(problem.hi[i]));
    seeds.push((&vt * brake).map(|a| a.clamp(-1.0, 1.0)));
    for _ in 0..cfg.candidates {
        seeds.push(DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0)));
    }
    let cands: Vec<(DVector<f64>, Candidate)> = seeds
        .into_iter()
        .map(|a| {
            let c = problem.evaluate(&a);
            (a, c)
        })
        .collect();

    let Some((mut raw, mut best, mut screen)) = first_feasible(problem, cands.clone(), usize::MAX, None)?
    else {
        return Err(infeasible(problem, &cands)?);
    };

    let mut width = 1.0;
    for _ in 0..cfg.sweeps {
        for i in 0..n {
            let line = line_candidates(problem, &raw, i, width);
            if let Some((r, c, s)) = first_feasible(problem, line, SCREEN_BUDGET, Some(&best))? {
                raw = r;
                best = c;
                screen = s;
            }
        }
        width *= 0.5;
    }

    let rays = ray_candidates(problem, &mut rng);
    if let Some((r, c, s)) = first_feasible(problem, rays, 2 * SCREEN_BUDGET, Some(&best))? {
        raw = r;
        best = c;
        screen = s;
    }

    let (best, screen) = rescale(problem, best, screen)?;
    Ok(StepChoice {
        alpha_raw: raw,
        candidate: best,
        screen,
    })
}

/// Scales the chosen velocity towards the desired closing speed. Direction, and therefore
/// cost, is unchanged; the scaled velocity is kept only if it remains feasible.
fn rescale(problem: &StepProblem<'_>, best: Candidate, screen: Screen) -> Result<(Candidate, Screen)> {
    let ee = problem.analysis.end_effector_velocity(&best.qd);
    let closing = best.metric.cos_theta_a * ee.norm();
    let (s_lo, s_hi) = problem.scale_range(&best.qd);
    let target = if closing > 0.0 {
        problem.desired_speed() / closing
    } else {
        0.0
    };
    let s = target.max(s_lo).max(MIN_SCALE).min(s_hi);
    if !(s.is_finite()) || s == 1.0 {
        return Ok((best, screen));
    }
    let tol = 1e-12;
    let try_scale = |s: f64| -> Result<Option<(Candidate, Screen)>> {
        let c = problem.evaluate_velocity(&best.qd * s);
        if (c.cost - best.cost).abs() > tol {
            return Ok(None);
        }
        let sc = problem.screen(&c)?;
        Ok(sc.feasible.then_some((c, sc)))
    };
    if let Some(found) = try_scale(s)? {
        return Ok(found);
    }
    // Move back towards the known-feasible scale of 1.
    let (mut bad, mut good) = (s, 1.0);
    let mut kept = None;
    for _ in 0..30 {
        let mid = 0.5 * (bad + good);
        match try_scale(mid)? {
            Some(found) => {
                good = mid;
                kept = Some(found);
            }
            None => bad = mid,
        }
    }
    Ok(kept.unwrap_or((best, screen)))
}

fn infeasible(problem: &StepProblem<'_>, cands: &[(DVector<f64>, Candidate)]) -> Result<SmsError> {
    let mut worst: Option<(f64, Screen)> = None;
    for (_, c) in cands {
        let s = problem.screen(c)?;
        if worst.as_ref().is_none_or(|(v, _)| s.violation < *v) {
            worst = Some((s.violation, s));
        }
    }
    let report = match worst {
        Some((v, s)) => format!(
            "least-violating candidate violates {} (total {v:.3e}), end-effector error {:.4} m",
            s.reasons.join(", "),
            problem.error
        ),
        None => "no candidates".into(),
    };
    Ok(SmsError::InfeasibleStep {
        step: problem.step,
        report,
    })
}

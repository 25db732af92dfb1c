//! Browser bindings: coupling metrics at a pose, planning towards a goal, closed-loop tracking.
//!
//! Every export returns a JSON string so the page needs no extra glue.

use nalgebra::{DVector, Vector3};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use sms_core::control::closed_loop_simulate_from;
use sms_core::coupling::CouplingAnalysis;
use sms_core::dynamics::inertia_blocks;
use sms_core::kinematics::{forward_kinematics, link_jacobians};
use sms_core::planner::plan_trajectory;
use sms_core::scenario::ScenarioConfig;
use sms_core::{SmsModel, SmsState};

#[derive(Serialize)]
struct Pose {
    base: [f64; 3],
    /// Base corners in the x-y plane.
    base_outline: Vec<[f64; 2]>,
    joints: Vec<[f64; 3]>,
    end_effector: [f64; 3],
}

fn pose(model: &SmsModel, state: &SmsState) -> Pose {
    let cache = forward_kinematics(model, state);
    let dims = model.base().dims;
    let base_outline = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|&(sx, sy)| {
            let c = cache.r_b + cache.rot_b * Vector3::new(sx * dims.x / 2.0, sy * dims.y / 2.0, 0.0);
            [c.x, c.y]
        })
        .collect();
    Pose {
        base: cache.r_b.into(),
        base_outline,
        joints: cache.p.iter().map(|p| (*p).into()).collect(),
        end_effector: cache.r_e.into(),
    }
}

#[derive(Serialize)]
struct Metrics {
    h_norm: f64,
    sigma: Vec<f64>,
    pose: Pose,
}

#[derive(Serialize)]
struct Failure {
    error: String,
}

fn to_json<T: Serialize>(value: &Result<T, sms_core::SmsError>) -> String {
    match value {
        Ok(v) => serde_json::to_string(v),
        Err(e) => serde_json::to_string(&Failure { error: e.to_string() }),
    }
    .unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn demo_config(goal_x: f64, goal_y: f64) -> Result<ScenarioConfig, sms_core::SmsError> {
    let mut config = ScenarioConfig::bundled("case1")?;
    config.file.target.offset = None;
    config.file.target.r_d = Some([goal_x, goal_y, 0.0]);
    ScenarioConfig::resolve(config.file)
}

/// Coupling spectrum and normalized entropy of the reference arm at joint angles in degrees.
#[wasm_bindgen]
pub fn coupling_metrics(q1_deg: f64, q2_deg: f64, q3_deg: f64) -> String {
    let model = SmsModel::reference();
    let mut state = SmsState::reference_initial();
    state.q = DVector::from_vec(vec![q1_deg.to_radians(), q2_deg.to_radians(), q3_deg.to_radians()]);
    let result = (|| {
        let cache = forward_kinematics(&model, &state);
        let jac = link_jacobians(&cache);
        let blocks = inertia_blocks(&model, &cache, &jac);
        let analysis = CouplingAnalysis::new(&blocks, &jac)?;
        Ok(Metrics {
            h_norm: analysis.h_norm(),
            sigma: analysis.svd.sigma.iter().copied().collect(),
            pose: pose(&model, &state),
        })
    })();
    to_json(&result)
}

#[derive(Serialize)]
struct PlanView {
    feasible: bool,
    diagnostics: Vec<String>,
    goal: [f64; 3],
    t: Vec<f64>,
    end_effector: Vec<[f64; 3]>,
    base: Vec<[f64; 3]>,
    error: Vec<f64>,
    h_norm: Vec<f64>,
    final_pose: Pose,
    max_base_displacement: f64,
}

/// Plans from the reference start towards `(goal_x, goal_y, 0)`.
#[wasm_bindgen]
pub fn plan(goal_x: f64, goal_y: f64) -> String {
    let result = demo_config(goal_x, goal_y).and_then(|c| {
        let plan = plan_trajectory(&c.model, &c.initial, &c.r_d, &c.planner)?;
        let last = plan.state(plan.n_steps());
        Ok(PlanView {
            feasible: plan.feasible,
            diagnostics: plan.diagnostics.clone(),
            goal: c.r_d.into(),
            t: plan.t.clone(),
            end_effector: plan.r_e.iter().map(|v| (*v).into()).collect(),
            base: plan.r_b.iter().map(|v| (*v).into()).collect(),
            error: plan.errors(),
            h_norm: plan.metrics.iter().map(|m| m.h_norm).collect(),
            final_pose: pose(&c.model, &last),
            max_base_displacement: plan.max_base_displacement(),
        })
    });
    to_json(&result)
}

#[derive(Serialize)]
struct TrackView {
    t: Vec<f64>,
    joint_error: Vec<f64>,
    ee_error: Vec<f64>,
    torque: Vec<Vec<f64>>,
    final_error: f64,
}

/// Plans towards the goal, then tracks the plan from an initial joint error in degrees.
/// Rows are thinned to every 20th control step.
#[wasm_bindgen]
pub fn track(goal_x: f64, goal_y: f64, initial_error_deg: f64) -> String {
    let result = demo_config(goal_x, goal_y).and_then(|mut c| {
        c.file.tracking.initial_error_deg = vec![initial_error_deg; c.model.dof()];
        let c = ScenarioConfig::resolve(c.file)?;
        let plan = plan_trajectory(&c.model, &c.initial, &c.r_d, &c.planner)?;
        let log = closed_loop_simulate_from(&c.model, &plan, &c.gains, &c.initial_error)?;
        let keep = (0..log.len()).step_by(20);
        Ok(TrackView {
            t: keep.clone().map(|k| log.t[k]).collect(),
            joint_error: keep.clone().map(|k| log.q_e[k].norm()).collect(),
            ee_error: keep.clone().map(|k| log.ee_err[k]).collect(),
            torque: keep.map(|k| log.tau[k].iter().copied().collect()).collect(),
            final_error: log.final_error(),
        })
    });
    to_json(&result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_json_has_entropy() {
        let v: serde_json::Value = serde_json::from_str(&coupling_metrics(1.0, 1.0, 1.0)).unwrap();
        let h = v["h_norm"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&h));
        assert_eq!(v["pose"]["joints"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn unreachable_goal_reports_error_or_infeasible() {
        let v: serde_json::Value = serde_json::from_str(&plan(5.0, 5.0)).unwrap();
        assert!(v.get("error").is_some() || v["feasible"] == false);
    }
}

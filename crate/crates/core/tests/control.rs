use nalgebra::{DVector, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sms_core::control::{
    closed_loop_simulate, closed_loop_simulate_from, control_torque, generalized_torque, lyapunov_check,
    reduced_dynamics, saturation, InitialError, JointReference, SmcGains,
};
use sms_core::coupling::CouplingAnalysis;
use sms_core::dynamics::{forward_dynamics, inertia_blocks, DynamicsTerms};
use sms_core::kinematics::{forward_kinematics, link_jacobians};
use sms_core::planner::{plan_trajectory, TrajectoryPlan};
use sms_core::scenario::ScenarioConfig;
use sms_core::{SmsError, SmsModel, SmsState};

fn random_state(rng: &mut ChaCha8Rng) -> SmsState {
    SmsState {
        r_b: Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
        eps: Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize(),
        q: DVector::from_fn(3, |_, _| rng.gen_range(-2.5..2.5)),
        v_b: Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3)),
        w_b: Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
        qd: DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
    }
}

fn case1_plan() -> (ScenarioConfig, TrajectoryPlan) {
    let c = ScenarioConfig::bundled("case1").unwrap();
    let plan = plan_trajectory(&c.model, &c.initial, &c.r_d, &c.planner).unwrap();
    (c, plan)
}

#[test]
fn immovable_base_recovers_joint_inertia() {
    let model = SmsModel::reference().with_base_mass_scale(1e9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let s = random_state(&mut rng);
        let terms = DynamicsTerms::evaluate(&model, &s);
        let red = reduced_dynamics(&terms.blocks, &terms.bias).unwrap();
        let h_m = &terms.blocks.h_m;
        assert!((&red.h_q - h_m).norm() <= 1e-6 * h_m.norm());
    }
}

#[test]
fn reduced_inertia_positive_definite() {
    let model = SmsModel::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let s = random_state(&mut rng);
        let terms = DynamicsTerms::evaluate(&model, &s);
        let red = reduced_dynamics(&terms.blocks, &terms.bias).unwrap();
        assert!((&red.h_q - red.h_q.transpose()).norm() <= 1e-10 * red.h_q.norm());
        assert!(red.h_q.clone().symmetric_eigenvalues().min() > 0.0);
    }
}

#[test]
fn zero_error_tracking_stays_on_plan() {
    let (c, plan) = case1_plan();
    let log = closed_loop_simulate(&c.model, &plan, &c.gains).unwrap();
    assert!(log.max_joint_error() <= 1e-3, "max |q_e| {}", log.max_joint_error());
    let rows = (plan.horizon() / c.gains.dt_ctrl + 1e-9).floor() as usize + 1;
    assert_eq!(log.len(), rows);
    for tau in &log.tau {
        for (t, m) in tau.iter().zip(c.gains.tau_max.iter()) {
            assert!(t.abs() <= *m);
        }
    }
    let (hl, ha) = log.max_momentum();
    assert!(hl <= 1e-7 && ha <= 1e-7);
}

#[test]
fn sliding_phase_decays_at_twice_gamma() {
    let (c, plan) = case1_plan();
    let log = closed_loop_simulate_from(&c.model, &plan, &c.gains, &c.initial_error).unwrap();
    let report = lyapunov_check(&log, &c.gains);
    assert_eq!(report.predicted_rate, 20.0);
    assert!(report.sliding_passed(0.2), "{report:?}");
}

#[test]
fn divergence_is_reported() {
    let (c, plan) = case1_plan();
    let mut gains = c.gains.clone();
    gains.tau_max = DVector::from_element(3, 1e-6);
    let start = InitialError {
        q_e: DVector::zeros(3),
        qd_e: Some(DVector::from_element(3, 5.0)),
    };
    match closed_loop_simulate_from(&c.model, &plan, &gains, &start) {
        Err(SmsError::ControllerDivergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|l| l.max_joint_error())),
    }
}

#[test]
fn control_step_coarser_than_plan_rejected() {
    let (c, plan) = case1_plan();
    let mut gains = c.gains.clone();
    gains.dt_ctrl = plan.dt * 2.0;
    assert!(closed_loop_simulate(&c.model, &plan, &gains).is_err());
}

/// Zero-momentum state at joint angles `q` with joint rates `qd`.
fn coupled_state(model: &SmsModel, q: [f64; 3], qd: [f64; 3]) -> SmsState {
    let mut s = SmsState::reference_initial();
    s.q = DVector::from_row_slice(&q);
    s.qd = DVector::from_row_slice(&qd);
    let cache = forward_kinematics(model, &s);
    let jac = link_jacobians(&cache);
    let blocks = inertia_blocks(model, &cache, &jac);
    let base = CouplingAnalysis::new(&blocks, &jac).unwrap().c_bm * &s.qd;
    s.v_b = Vector3::new(base[0], base[1], base[2]);
    s.w_b = Vector3::new(base[3], base[4], base[5]);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Unclamped law: H_q ds/dt = -K_s sat(s / lambda), so s^T H_q ds/dt + s^T K_s sat = 0.
    #[test]
    fn switching_term_sets_surface_dynamics(
        q in prop::array::uniform3(-1.5f64..1.5),
        qd in prop::array::uniform3(-0.5f64..0.5),
        dq in prop::array::uniform3(-0.01f64..0.01),
        dqd in prop::array::uniform3(-0.1f64..0.1),
        qdd_ref in prop::array::uniform3(-0.5f64..0.5),
    ) {
        let model = SmsModel::reference();
        let gains = SmcGains::reference();
        let state = coupled_state(&model, q, qd);
        let reference = JointReference {
            q: &state.q - DVector::from_row_slice(&dq),
            qd: &state.qd - DVector::from_row_slice(&dqd),
            qdd: DVector::from_row_slice(&qdd_ref),
        };
        let out = control_torque(&model, &state, &reference, &gains).unwrap();
        prop_assume!(!out.clamped.iter().any(|&c| c));

        let acc = forward_dynamics(&model, &state, &generalized_torque(&out.tau)).unwrap();
        let qdd = acc.rows(6, 3).into_owned();
        let s_dot = qdd - &reference.qdd + &gains.gamma * &out.qd_e;
        let switching = &gains.k_s * saturation(&out.s, gains.lambda);
        let lhs = out.s.dot(&(&out.reduced.h_q * &s_dot));
        let rhs = out.s.dot(&switching);
        prop_assert!((lhs + rhs).abs() <= 1e-9 * (1.0 + rhs.abs()) , "lhs {lhs} rhs {rhs}");
    }
}

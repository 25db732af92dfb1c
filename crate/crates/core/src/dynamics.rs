//! Equations of motion of the free-floating system.
//!
//! Generalized velocity is `nu = [v_b; w_b; qd]` with `w_b` in the inertial frame.
//! The motion equation is `H(Phi) nu_dot + c(Phi, nu) = tau`, where `c = C(Phi, nu) nu`.
//!
//! Two independent routes produce the velocity-product term:
//! * [`coriolis_vector`] evaluates it exactly from the body accelerations at `nu_dot = 0`
//!   projected through the partial velocities (Kane's method);
//! * [`coriolis_matrix`] builds `C` from Christoffel symbols of finite-differenced `H`,
//!   plus the gyroscopic term `[L_b x]` that the rotational quasi-velocity requires.
//!   This matrix satisfies `x^T (H_dot - 2C) x = 0`.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};

use crate::error::{Result, SmsError};
use crate::kinematics::{forward_kinematics, link_jacobians, KinematicsCache, LinkJacobians};
use crate::math::{quat_kinematics_matrix, rotate_eps_inertial, skew};
use crate::model::{SmsModel, SmsState};

/// Condition-number ceiling for the mass matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Step used for the finite-difference partials of `H`.
pub const CHRISTOFFEL_STEP: f64 = 1e-6;

/// Sub-blocks of the generalized inertia matrix, all in inertial-frame coordinates.
#[derive(Debug, Clone)]
pub struct InertiaBlocks {
    pub h_v: Matrix3<f64>,
    pub h_vw: Matrix3<f64>,
    pub h_w: Matrix3<f64>,
    pub h_vm: DMatrix<f64>,
    pub h_wm: DMatrix<f64>,
    pub h_m: DMatrix<f64>,
    /// `r_c - r_b`.
    pub r_cb: Vector3<f64>,
    /// `r_i - r_b` for each link.
    pub r_ib: Vec<Vector3<f64>>,
}

impl InertiaBlocks {
    pub fn dof(&self) -> usize {
        self.h_m.nrows()
    }

    /// Momentum coefficient block `[[H_v, H_vw], [H_vw^T, H_w]]`.
    pub fn base_block(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.h_v);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&self.h_vw);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&self.h_vw.transpose());
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.h_w);
        m
    }

    /// `[H_vm; H_wm]`, the 6 x n base-manipulator coupling inertia.
    pub fn coupling_block(&self) -> DMatrix<f64> {
        let n = self.dof();
        let mut m = DMatrix::zeros(6, n);
        m.rows_mut(0, 3).copy_from(&self.h_vm);
        m.rows_mut(3, 3).copy_from(&self.h_wm);
        m
    }

    /// Assembled `(6+n) x (6+n)` generalized inertia matrix.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let n = self.dof();
        let mut h = DMatrix::zeros(6 + n, 6 + n);
        let base = self.base_block();
        h.view_mut((0, 0), (6, 6)).copy_from(&base);
        let coupling = self.coupling_block();
        h.view_mut((0, 6), (6, n)).copy_from(&coupling);
        h.view_mut((6, 0), (n, 6)).copy_from(&coupling.transpose());
        h.view_mut((6, 6), (n, n)).copy_from(&self.h_m);
        h
    }
}

/// Inertia tensor rotated into the inertial frame.
fn inertial_tensor(rot: &Matrix3<f64>, body: &Matrix3<f64>) -> Matrix3<f64> {
    rot * body * rot.transpose()
}

pub fn inertia_blocks(model: &SmsModel, cache: &KinematicsCache, jac: &LinkJacobians) -> InertiaBlocks {
    let n = model.dof();
    let m_c = model.total_mass();
    let r_c = cache.center_of_mass(model);
    let r_cb = r_c - cache.r_b;

    let mut h_w = inertial_tensor(&cache.rot_b, &model.base().inertia);
    let mut h_vm = DMatrix::zeros(3, n);
    let mut h_wm = DMatrix::zeros(3, n);
    let mut h_m = DMatrix::zeros(n, n);
    let mut r_ib = Vec::with_capacity(n);

    for (i, link) in model.links().iter().enumerate() {
        let inertia = inertial_tensor(&cache.rot[i], &link.inertia);
        let rib = cache.r[i] - cache.r_b;
        let rib_x = skew(&rib);
        h_w += inertia + link.mass * rib_x.transpose() * rib_x;
        let jt = &jac.j_t[i];
        let jr = &jac.j_r[i];
        h_vm += link.mass * jt;
        h_wm += inertia * jr + link.mass * rib_x * jt;
        h_m += jr.transpose() * inertia * jr + link.mass * jt.transpose() * jt;
        r_ib.push(rib);
    }

    InertiaBlocks {
        h_v: Matrix3::identity() * m_c,
        h_vw: m_c * skew(&r_cb).transpose(),
        h_w,
        h_vm,
        h_wm,
        h_m,
        r_cb,
        r_ib,
    }
}

/// `T = 0.5 nu^T H nu`.
pub fn kinetic_energy(blocks: &InertiaBlocks, v_b: &Vector3<f64>, w_b: &Vector3<f64>, qd: &DVector<f64>) -> f64 {
    let n = blocks.dof();
    let mut nu = DVector::zeros(6 + n);
    nu.fixed_rows_mut::<3>(0).copy_from(v_b);
    nu.fixed_rows_mut::<3>(3).copy_from(w_b);
    nu.rows_mut(6, n).copy_from(qd);
    0.5 * nu.dot(&(blocks.mass_matrix() * &nu))
}

/// Inertial velocities of every link, propagated outward along the chain.
#[derive(Debug, Clone)]
pub struct BodyVelocities {
    /// Link centre-of-mass velocities.
    pub v: Vec<Vector3<f64>>,
    /// Link angular velocities.
    pub w: Vec<Vector3<f64>>,
}

pub fn body_velocities(cache: &KinematicsCache, state: &SmsState) -> BodyVelocities {
    let n = cache.dof();
    let mut v = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut w_parent = state.w_b;
    let mut v_joint = state.v_b + state.w_b.cross(&(cache.p[0] - cache.r_b));
    for i in 0..n {
        let w_i = w_parent + cache.axes[i] * state.qd[i];
        v.push(v_joint + w_i.cross(&(cache.r[i] - cache.p[i])));
        let outboard = if i + 1 < n { cache.p[i + 1] } else { cache.r_e };
        v_joint += w_i.cross(&(outboard - cache.p[i]));
        w.push(w_i);
        w_parent = w_i;
    }
    BodyVelocities { v, w }
}

/// Everything the motion equation needs at one state.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub cache: KinematicsCache,
    pub jac: LinkJacobians,
    pub blocks: InertiaBlocks,
    pub mass: DMatrix<f64>,
    /// `C(Phi, nu) nu`.
    pub bias: DVector<f64>,
}

impl DynamicsTerms {
    pub fn evaluate(model: &SmsModel, state: &SmsState) -> Self {
        let cache = forward_kinematics(model, state);
        let jac = link_jacobians(&cache);
        let blocks = inertia_blocks(model, &cache, &jac);
        let mass = blocks.mass_matrix();
        let bias = velocity_product_forces(model, state, &cache, &jac);
        DynamicsTerms {
            cache,
            jac,
            blocks,
            mass,
            bias,
        }
    }
}

/// Generalized forces of the velocity-product accelerations (`nu_dot = 0`).
fn velocity_product_forces(
    model: &SmsModel,
    state: &SmsState,
    cache: &KinematicsCache,
    jac: &LinkJacobians,
) -> DVector<f64> {
    let n = model.dof();
    let mut out = DVector::zeros(6 + n);

    let base_inertia = inertial_tensor(&cache.rot_b, &model.base().inertia);
    let base_gyro = state.w_b.cross(&(base_inertia * state.w_b));
    out.fixed_rows_mut::<3>(3).add_assign(&base_gyro);

    let w_b = state.w_b;
    let mut w_parent = w_b;
    let mut alpha_parent = Vector3::zeros();
    let lever0 = cache.p[0] - cache.r_b;
    let mut a_joint = w_b.cross(&w_b.cross(&lever0));

    for i in 0..n {
        let link = &model.links()[i];
        let k = cache.axes[i];
        let qd = state.qd[i];
        let w_i = w_parent + k * qd;
        let alpha_i = alpha_parent + w_parent.cross(&k) * qd;

        let e = cache.r[i] - cache.p[i];
        let a_com = a_joint + alpha_i.cross(&e) + w_i.cross(&w_i.cross(&e));
        let outboard = if i + 1 < n { cache.p[i + 1] } else { cache.r_e };
        let d = outboard - cache.p[i];
        a_joint += alpha_i.cross(&d) + w_i.cross(&w_i.cross(&d));

        let inertia = inertial_tensor(&cache.rot[i], &link.inertia);
        let force = link.mass * a_com;
        let moment = inertia * alpha_i + w_i.cross(&(inertia * w_i));

        let rib = cache.r[i] - cache.r_b;
        out.fixed_rows_mut::<3>(0).add_assign(&force);
        out.fixed_rows_mut::<3>(3)
            .add_assign(&(rib.cross(&force) + moment));
        let joint_part = jac.j_t[i].transpose() * force + jac.j_r[i].transpose() * moment;
        out.rows_mut(6, n).add_assign(&joint_part);

        w_parent = w_i;
        alpha_parent = alpha_i;
    }
    out
}


/// Velocity-product vector `C(Phi, nu) nu` (Coriolis, centrifugal and gyroscopic terms).
pub fn coriolis_vector(model: &SmsModel, state: &SmsState) -> DVector<f64> {
    let cache = forward_kinematics(model, state);
    let jac = link_jacobians(&cache);
    velocity_product_forces(model, state, &cache, &jac)
}

pub fn mass_matrix(model: &SmsModel, state: &SmsState) -> DMatrix<f64> {
    let cache = forward_kinematics(model, state);
    let jac = link_jacobians(&cache);
    inertia_blocks(model, &cache, &jac).mass_matrix()
}

/// Copy of `state` displaced by `h` along velocity coordinate `k`
/// (base translation, inertial base rotation, or joint angle).
fn displaced(state: &SmsState, k: usize, h: f64) -> SmsState {
    let mut s = state.clone();
    match k {
        0..=2 => s.r_b[k] += h,
        3..=5 => {
            let mut axis = Vector3::zeros();
            axis[k - 3] = 1.0;
            s.eps = rotate_eps_inertial(&state.eps, &axis, h);
        }
        _ => s.q[k - 6] += h,
    }
    s
}

/// Central-difference derivative of `H` along each velocity coordinate.
pub fn mass_matrix_partials(model: &SmsModel, state: &SmsState) -> Vec<DMatrix<f64>> {
    let dim = 6 + model.dof();
    let h = CHRISTOFFEL_STEP;
    (0..dim)
        .map(|k| {
            if k < 3 {
                // H does not depend on the base position.
                DMatrix::zeros(dim, dim)
            } else {
                let plus = mass_matrix(model, &displaced(state, k, h));
                let minus = mass_matrix(model, &displaced(state, k, -h));
                (plus - minus) / (2.0 * h)
            }
        })
        .collect()
}

/// Coriolis matrix from Christoffel symbols of the first kind plus the rotational
/// gyroscopic correction. `coriolis_matrix(..) * nu` reproduces [`coriolis_vector`].
pub fn coriolis_matrix(model: &SmsModel, state: &SmsState) -> DMatrix<f64> {
    let dim = 6 + model.dof();
    let partials = mass_matrix_partials(model, state);
    let nu = state.velocity();
    let mut c = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                let christoffel = 0.5 * (partials[k][(i, j)] + partials[j][(i, k)] - partials[i][(j, k)]);
                acc += christoffel * nu[k];
            }
            c[(i, j)] = acc;
        }
    }
    let h = mass_matrix(model, state);
    let momentum = &h * &nu;
    let l_b = Vector3::new(momentum[3], momentum[4], momentum[5]);
    let gyro = skew(&l_b);
    for r in 0..3 {
        for col in 0..3 {
            c[(3 + r, 3 + col)] += gyro[(r, col)];
        }
    }
    c
}

/// Time derivative of `H` along the current velocity, by central differences.
pub fn mass_matrix_rate(model: &SmsModel, state: &SmsState, h: f64) -> DMatrix<f64> {
    let advance = |sign: f64| {
        let mut s = state.clone();
        s.r_b += sign * h * state.v_b;
        let w = state.w_b.norm();
        if w > 0.0 {
            s.eps = rotate_eps_inertial(&state.eps, &(state.w_b / w), sign * h * w);
        }
        s.q += sign * h * &state.qd;
        s
    };
    (mass_matrix(model, &advance(1.0)) - mass_matrix(model, &advance(-1.0))) / (2.0 * h)
}

/// Ratio of extreme eigenvalues of a symmetric matrix.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `H nu_dot = tau - c` for the generalized acceleration.
pub fn forward_dynamics(model: &SmsModel, state: &SmsState, tau: &DVector<f64>) -> Result<DVector<f64>> {
    let terms = DynamicsTerms::evaluate(model, state);
    solve_acceleration(&terms, tau)
}

pub(crate) fn solve_acceleration(terms: &DynamicsTerms, tau: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = terms.mass.nrows();
    if tau.len() != dim {
        return Err(SmsError::InvalidState(format!(
            "generalized force has {} entries, expected {dim}",
            tau.len()
        )));
    }
    let cond = symmetric_condition(&terms.mass);
    if !(cond < MAX_CONDITION) {
        return Err(SmsError::SingularConfiguration {
            cond,
            limit: MAX_CONDITION,
        });
    }
    let chol = terms
        .mass
        .clone()
        .cholesky()
        .ok_or(SmsError::SingularConfiguration {
            cond,
            limit: MAX_CONDITION,
        })?;
    Ok(chol.solve(&(tau - &terms.bias)))
}

/// Linear and angular momentum about the inertial origin, from the inertia blocks.
pub fn momentum(model: &SmsModel, state: &SmsState) -> (Vector3<f64>, Vector3<f64>) {
    let cache = forward_kinematics(model, state);
    let jac = link_jacobians(&cache);
    let blocks = inertia_blocks(model, &cache, &jac);
    momentum_from_blocks(&blocks, state)
}

pub fn momentum_from_blocks(blocks: &InertiaBlocks, state: &SmsState) -> (Vector3<f64>, Vector3<f64>) {
    let base = blocks.base_block();
    let coupling = blocks.coupling_block();
    let mut vb = nalgebra::Vector6::zeros();
    vb.fixed_rows_mut::<3>(0).copy_from(&state.v_b);
    vb.fixed_rows_mut::<3>(3).copy_from(&state.w_b);
    let hm = base * vb + coupling * &state.qd;
    let h_l = Vector3::new(hm[0], hm[1], hm[2]);
    // Rows 4..6 give angular momentum about the base centre; shift to the origin.
    let h_b = Vector3::new(hm[3], hm[4], hm[5]);
    (h_l, h_b + state.r_b.cross(&h_l))
}

/// Momentum by summing over bodies: `sum m v` and `sum (I w + r x m v)`.
pub fn momentum_per_body(model: &SmsModel, state: &SmsState) -> (Vector3<f64>, Vector3<f64>) {
    let cache = forward_kinematics(model, state);
    let vel = body_velocities(&cache, state);
    let base = model.base();
    let mut h_l = base.mass * state.v_b;
    let mut h_a = inertial_tensor(&cache.rot_b, &base.inertia) * state.w_b
        + state.r_b.cross(&(base.mass * state.v_b));
    for (i, link) in model.links().iter().enumerate() {
        let mv = link.mass * vel.v[i];
        h_l += mv;
        h_a += inertial_tensor(&cache.rot[i], &link.inertia) * vel.w[i] + cache.r[i].cross(&mv);
    }
    (h_l, h_a)
}

/// Kinetic energy summed body by body.
pub fn kinetic_energy_per_body(model: &SmsModel, state: &SmsState) -> f64 {
    let cache = forward_kinematics(model, state);
    let vel = body_velocities(&cache, state);
    let base = model.base();
    let ib = inertial_tensor(&cache.rot_b, &base.inertia);
    let mut t = 0.5 * (base.mass * state.v_b.norm_squared() + state.w_b.dot(&(ib * state.w_b)));
    for (i, link) in model.links().iter().enumerate() {
        let ii = inertial_tensor(&cache.rot[i], &link.inertia);
        t += 0.5 * (link.mass * vel.v[i].norm_squared() + vel.w[i].dot(&(ii * vel.w[i])));
    }
    t
}

/// Time derivative of the full state.
#[derive(Debug, Clone)]
pub struct StateRate {
    pub r_b: Vector3<f64>,
    pub eps: nalgebra::Vector4<f64>,
    pub q: DVector<f64>,
    pub nu: DVector<f64>,
}

pub fn state_rate(model: &SmsModel, state: &SmsState, tau: &DVector<f64>) -> Result<StateRate> {
    let terms = DynamicsTerms::evaluate(model, state);
    let nu_dot = solve_acceleration(&terms, tau)?;
    Ok(StateRate {
        r_b: state.v_b,
        eps: attitude_rate(state, &terms.cache.rot_b),
        q: state.qd.clone(),
        nu: nu_dot,
    })
}

/// Quaternion rate from the inertial angular velocity (converted to the body frame).
pub(crate) fn attitude_rate(state: &SmsState, rot_b: &Matrix3<f64>) -> nalgebra::Vector4<f64> {
    let w_body = rot_b.transpose() * state.w_b;
    0.5 * quat_kinematics_matrix(&state.eps) * w_body
}

fn advanced(state: &SmsState, rate: &StateRate, h: f64) -> SmsState {
    let mut s = state.clone();
    s.r_b += rate.r_b * h;
    s.eps += rate.eps * h;
    s.q += &rate.q * h;
    let nu = state.velocity() + &rate.nu * h;
    s.set_velocity(&nu);
    s
}

/// One classical Runge-Kutta step with `tau` held constant; the quaternion is renormalized.
pub fn integrate_step(model: &SmsModel, state: &SmsState, tau: &DVector<f64>, dt: f64) -> Result<SmsState> {
    if !(dt > 0.0) {
        return Err(SmsError::InvalidState(format!("time step must be > 0, got {dt}")));
    }
    let k1 = state_rate(model, state, tau)?;
    let k2 = state_rate(model, &advanced(state, &k1, dt / 2.0), tau)?;
    let k3 = state_rate(model, &advanced(state, &k2, dt / 2.0), tau)?;
    let k4 = state_rate(model, &advanced(state, &k3, dt), tau)?;
    let combined = StateRate {
        r_b: (k1.r_b + 2.0 * k2.r_b + 2.0 * k3.r_b + k4.r_b) / 6.0,
        eps: (k1.eps + 2.0 * k2.eps + 2.0 * k3.eps + k4.eps) / 6.0,
        q: (&k1.q + 2.0 * &k2.q + 2.0 * &k3.q + &k4.q) / 6.0,
        nu: (&k1.nu + 2.0 * &k2.nu + 2.0 * &k3.nu + &k4.nu) / 6.0,
    };
    let mut next = advanced(state, &combined, dt);
    next.normalize_attitude();
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn total_mass_block() {
        let model = SmsModel::reference();
        let cache = forward_kinematics(&model, &SmsState::reference_initial());
        let blocks = inertia_blocks(&model, &cache, &link_jacobians(&cache));
        assert_eq!(blocks.h_v, Matrix3::identity() * 32.722);
    }

    #[test]
    fn mass_matrix_symmetric_positive() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let h = mass_matrix(&model, &s);
            let asym = crate::math::max_abs(&(&h - h.transpose()));
            assert!(asym <= 1e-10 * h.norm());
            let min_eig = h.symmetric_eigenvalues().min();
            assert!(min_eig > 0.0);
        }
    }

    #[test]
    fn energy_block_vs_per_body() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let cache = forward_kinematics(&model, &s);
            let blocks = inertia_blocks(&model, &cache, &link_jacobians(&cache));
            let t_block = kinetic_energy(&blocks, &s.v_b, &s.w_b, &s.qd);
            let t_body = kinetic_energy_per_body(&model, &s);
            assert!((t_block - t_body).abs() <= 1e-9 * t_body);
        }
    }

    #[test]
    fn pure_translation_energy() {
        let model = SmsModel::reference();
        let mut s = SmsState::reference_initial();
        s.v_b = Vector3::new(0.1, -0.2, 0.05);
        let cache = forward_kinematics(&model, &s);
        let blocks = inertia_blocks(&model, &cache, &link_jacobians(&cache));
        let t = kinetic_energy(&blocks, &s.v_b, &s.w_b, &s.qd);
        let expected = 0.5 * model.total_mass() * s.v_b.norm_squared();
        assert!((t - expected).abs() < 1e-13);
        assert_eq!(kinetic_energy(&blocks, &Vector3::zeros(), &Vector3::zeros(), &DVector::zeros(3)), 0.0);
    }

    #[test]
    fn momentum_block_vs_per_body() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let (l1, a1) = momentum(&model, &s);
            let (l2, a2) = momentum_per_body(&model, &s);
            assert!((l1 - l2).norm() <= 1e-10 * l2.norm().max(1.0));
            assert!((a1 - a2).norm() <= 1e-10 * a2.norm().max(1.0));
        }
        let rest = SmsState::reference_initial();
        let (l, a) = momentum(&model, &rest);
        assert_eq!(l, Vector3::zeros());
        assert_eq!(a, Vector3::zeros());
    }

    #[test]
    fn coriolis_zero_at_rest() {
        let model = SmsModel::reference();
        let c = coriolis_vector(&model, &SmsState::reference_initial());
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn christoffel_route_matches_kane_route() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_state(&mut rng);
            let kane = coriolis_vector(&model, &s);
            let christoffel = coriolis_matrix(&model, &s) * s.velocity();
            let scale = kane.norm().max(1e-3);
            assert!((kane - christoffel).norm() <= 1e-6 * scale);
        }
    }

    #[test]
    fn coriolis_skew_property() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_state(&mut rng);
            let hdot = mass_matrix_rate(&model, &s, 1e-6);
            let c = coriolis_matrix(&model, &s);
            let n = &hdot - 2.0 * &c;
            for _ in 0..5 {
                let x = DVector::from_fn(9, |_, _| rng.gen_range(-1.0..1.0));
                let val = x.dot(&(&n * &x));
                assert!(val.abs() <= 1e-6 * x.norm_squared() * hdot.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn forward_dynamics_residual() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let tau = DVector::from_fn(9, |_, _| rng.gen_range(-2.0..2.0));
            let acc = forward_dynamics(&model, &s, &tau).unwrap();
            let terms = DynamicsTerms::evaluate(&model, &s);
            let residual = &terms.mass * &acc + &terms.bias - &tau;
            assert!(residual.norm() <= 1e-10 * tau.norm() + 1e-12);
        }
        let rest = forward_dynamics(&model, &SmsState::reference_initial(), &DVector::zeros(9)).unwrap();
        assert!(rest.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rk4_rest_is_fixed_point() {
        let model = SmsModel::reference();
        let s = SmsState::reference_initial();
        let next = integrate_step(&model, &s, &DVector::zeros(9), 1e-3).unwrap();
        assert_eq!(next, s);
        assert!(integrate_step(&model, &s, &DVector::zeros(9), 0.0).is_err());
    }

    #[test]
    fn rk4_keeps_unit_quaternion() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = random_state(&mut rng);
        for _ in 0..50 {
            s = integrate_step(&model, &s, &DVector::zeros(9), 1e-2).unwrap();
            assert!((s.eps.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let model = SmsModel::reference();
        let mut start = SmsState::reference_initial();
        start.qd = DVector::from_vec(vec![0.4, -0.3, 0.5]);
        start.w_b = Vector3::new(0.0, 0.0, 0.05);
        let tau = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05, -0.02, 0.01]);
        let run = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let mut s = start.clone();
            for _ in 0..steps {
                s = integrate_step(&model, &s, &tau, dt).unwrap();
            }
            s
        };
        let reference = run(0.02 / 100.0);
        let err = |s: &SmsState| {
            (&s.q - &reference.q).norm() + (&s.qd - &reference.qd).norm() + (s.eps - reference.eps).norm()
        };
        let coarse = err(&run(0.04));
        let fine = err(&run(0.02));
        let ratio = coarse / fine;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }
}

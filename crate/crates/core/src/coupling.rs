//! Base-manipulator coupling under zero momentum and the scalar metrics derived from it.
//!
//! `C_bm` maps joint rates to the base twist the arm induces. Its singular vectors give the
//! joint-space directions ordered by how strongly they move the base; the normalized entropy
//! of the singular values says whether that coupling is concentrated in one mode or spread
//! evenly, and the assistance metric says whether a chosen joint motion pushes the end
//! effector towards the goal.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};

use crate::dynamics::{symmetric_condition, InertiaBlocks, MAX_CONDITION};
use crate::error::{Result, SmsError};
use crate::kinematics::LinkJacobians;
use crate::math::complete_orthonormal_basis;

/// Singular values below `PINV_RTOL * sigma_1` are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

/// Default softplus sharpness.
pub const DEFAULT_KAPPA: f64 = 10.0;

/// `C_bm = -[[H_v, H_vw], [H_vw^T, H_w]]^-1 [H_vm; H_wm]`.
pub fn coupling_matrix(blocks: &InertiaBlocks) -> Result<DMatrix<f64>> {
    let base = blocks.base_block();
    let cond = symmetric_condition(&DMatrix::from_iterator(6, 6, base.iter().cloned()));
    if !(cond < MAX_CONDITION) {
        return Err(SmsError::Conditioning(format!(
            "momentum coefficient block has condition number {cond:.3e}"
        )));
    }
    let chol = base
        .cholesky()
        .ok_or_else(|| SmsError::Conditioning("momentum coefficient block is not positive definite".into()))?;
    let coupling = blocks.coupling_block();
    let mut out = DMatrix::zeros(6, coupling.ncols());
    for (j, col) in coupling.column_iter().enumerate() {
        let rhs = nalgebra::Vector6::from_iterator(col.iter().cloned());
        let sol = chol.solve(&rhs);
        out.column_mut(j).copy_from(&(-sol));
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff. Returns the rank too.
pub fn pseudo_inverse(m: &DMatrix<f64>, rtol: f64) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;
    let mut inv = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            inv += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    (inv, rank)
}

#[derive(Debug, Clone)]
pub struct GeneralizedJacobian {
    /// `J* = J_b C_bm + J_m`.
    pub j_star: DMatrix<f64>,
    pub j_star_pinv: DMatrix<f64>,
    /// `C_be = C_bm J*^+`.
    pub c_be: Matrix6<f64>,
    pub rank: usize,
    /// Set when `J*` has rank below `min(6, n)`.
    pub rank_deficient: bool,
}

pub fn generalized_jacobian(j_b: &Matrix6<f64>, j_m: &DMatrix<f64>, c_bm: &DMatrix<f64>) -> GeneralizedJacobian {
    let j_b = DMatrix::from_iterator(6, 6, j_b.iter().cloned());
    let j_star = &j_b * c_bm + j_m;
    let (j_star_pinv, rank) = pseudo_inverse(&j_star, PINV_RTOL);
    let c_be_dyn = c_bm * &j_star_pinv;
    let c_be = Matrix6::from_iterator(c_be_dyn.iter().cloned());
    GeneralizedJacobian {
        rank_deficient: rank < j_star.nrows().min(j_star.ncols()),
        j_star,
        j_star_pinv,
        c_be,
        rank,
    }
}

/// Singular value decomposition of `C_bm` with the entropy of its spectrum.
#[derive(Debug, Clone)]
pub struct SvdMetrics {
    /// 6 x 6, columns are base-motion directions.
    pub u: DMatrix<f64>,
    /// `min(6, n)` values, descending.
    pub sigma: DVector<f64>,
    /// n x n, columns are joint-space coupling directions.
    pub v: DMatrix<f64>,
    pub h_norm: f64,
    /// All singular values are zero.
    pub degenerate: bool,
}

impl SvdMetrics {
    /// `U Sigma V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (rows, cols) = (self.u.nrows(), self.v.nrows());
        let mut sigma = DMatrix::zeros(rows, cols);
        for (i, &s) in self.sigma.iter().enumerate() {
            sigma[(i, i)] = s;
        }
        &self.u * sigma * self.v.transpose()
    }
}

/// Normalized Shannon entropy of a singular-value spectrum over `n` modes.
///
/// Returns `(H_norm, degenerate)`; an all-zero spectrum gives `(0, true)`.
pub fn normalized_entropy(sigma: &[f64], n: usize) -> Result<(f64, bool)> {
    if n < 2 {
        return Err(SmsError::UnsupportedDimension(format!(
            "entropy needs at least two joints, got {n}"
        )));
    }
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Ok((0.0, true));
    }
    let h: f64 = sigma
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let h_norm = h / (n as f64).ln();
    // A uniform spectrum lands within a few ulps of 1; report it as exactly uniform.
    let h_norm = if (h_norm - 1.0).abs() <= 8.0 * f64::EPSILON { 1.0 } else { h_norm };
    Ok((h_norm.clamp(0.0, 1.0), false))
}

pub fn svd_metrics(c_bm: &DMatrix<f64>) -> Result<SvdMetrics> {
    let (rows, n) = c_bm.shape();
    if n < 2 {
        return Err(SmsError::UnsupportedDimension(format!(
            "coupling analysis needs at least two joints, got {n}"
        )));
    }
    let svd = c_bm.clone().svd(true, true);
    let u_thin = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let k = svd.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut sigma = DVector::zeros(k);
    let mut u_cols = DMatrix::zeros(rows, k);
    let mut v_cols = DMatrix::zeros(n, k);
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = svd.singular_values[src];
        let mut u_col = u_thin.column(src).into_owned();
        let mut v_col = v_t.row(src).transpose();
        // Sign convention: largest-magnitude entry of v_i is positive.
        let pivot = v_col.iter().cloned().enumerate().fold((0, 0.0_f64), |best, (i, x)| {
            if x.abs() > best.1.abs() {
                (i, x)
            } else {
                best
            }
        });
        if pivot.1 < 0.0 {
            v_col = -v_col;
            u_col = -u_col;
        }
        u_cols.column_mut(dst).copy_from(&u_col);
        v_cols.column_mut(dst).copy_from(&v_col);
    }

    let u = complete_orthonormal_basis(&u_cols);
    let v = complete_orthonormal_basis(&v_cols);
    let (h_norm, degenerate) = normalized_entropy(sigma.as_slice(), n)?;
    Ok(SvdMetrics {
        u,
        sigma,
        v,
        h_norm,
        degenerate,
    })
}

/// `qd_DC = sum alpha_i v_i = V alpha`.
pub fn coupled_joint_velocity(alpha: &DVector<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    if alpha.len() != v.ncols() {
        return Err(SmsError::validation(
            "alpha",
            format!("expected {} entries, got {}", v.ncols(), alpha.len()),
        ));
    }
    if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(a.abs() <= 1.0)) {
        return Err(SmsError::validation(
            format!("alpha[{i}]"),
            format!("must lie in [-1, 1], got {a}"),
        ));
    }
    Ok(v * alpha)
}

/// `(1/kappa) ln(1 + exp(kappa x))` without overflow.
pub fn softplus(x: f64, kappa: f64) -> f64 {
    let z = kappa * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / kappa
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssistStatus {
    Valid,
    /// End effector is on the goal; no direction is defined.
    AtGoal,
    /// The coupled joint velocity produces no end-effector translation.
    NoInducedMotion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssistMetric {
    pub cos_theta_a: f64,
    pub c_tilde: f64,
    pub status: AssistStatus,
}

pub const AT_GOAL_DISTANCE: f64 = 1e-9;
pub const MIN_INDUCED_SPEED: f64 = 1e-12;

/// Cosine between the coupled end-effector velocity and the direction to the goal,
/// with its softplus transform.
pub fn assist_metric(
    qd_dc: &DVector<f64>,
    j_star: &DMatrix<f64>,
    r_e: &Vector3<f64>,
    r_d: &Vector3<f64>,
    kappa: f64,
) -> AssistMetric {
    let to_goal = r_d - r_e;
    let neutral = |status| AssistMetric {
        cos_theta_a: 0.0,
        c_tilde: softplus(0.0, kappa),
        status,
    };
    let dist = to_goal.norm();
    if dist <= AT_GOAL_DISTANCE {
        return neutral(AssistStatus::AtGoal);
    }
    let twist = j_star * qd_dc;
    let ee_vel = Vector3::new(twist[0], twist[1], twist[2]);
    let speed = ee_vel.norm();
    if speed <= MIN_INDUCED_SPEED {
        return neutral(AssistStatus::NoInducedMotion);
    }
    let d_hat = to_goal / dist;
    let cos = (d_hat.dot(&ee_vel) / speed).clamp(-1.0, 1.0);
    AssistMetric {
        cos_theta_a: cos,
        c_tilde: softplus(cos, kappa),
        status: AssistStatus::Valid,
    }
}

/// Full coupling picture at one configuration.
#[derive(Debug, Clone)]
pub struct CouplingAnalysis {
    pub c_bm: DMatrix<f64>,
    pub jacobian: GeneralizedJacobian,
    pub svd: SvdMetrics,
}

impl CouplingAnalysis {
    pub fn new(blocks: &InertiaBlocks, jac: &LinkJacobians) -> Result<Self> {
        let c_bm = coupling_matrix(blocks)?;
        let jacobian = generalized_jacobian(&jac.j_b, &jac.j_m, &c_bm);
        let svd = svd_metrics(&c_bm)?;
        Ok(CouplingAnalysis { c_bm, jacobian, svd })
    }

    pub fn h_norm(&self) -> f64 {
        self.svd.h_norm
    }

    pub fn j_star(&self) -> &DMatrix<f64> {
        &self.jacobian.j_star
    }

    /// Translational rows of `J*` applied to a joint velocity.
    pub fn end_effector_velocity(&self, qd: &DVector<f64>) -> Vector3<f64> {
        let twist = &self.jacobian.j_star * qd;
        Vector3::new(twist[0], twist[1], twist[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::inertia_blocks;
    use crate::kinematics::{forward_kinematics, link_jacobians};
    use crate::model::{SmsModel, SmsState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn analysis_at(model: &SmsModel, s: &SmsState) -> (CouplingAnalysis, InertiaBlocks, LinkJacobians) {
        let cache = forward_kinematics(model, s);
        let jac = link_jacobians(&cache);
        let blocks = inertia_blocks(model, &cache, &jac);
        (CouplingAnalysis::new(&blocks, &jac).unwrap(), blocks, jac)
    }

    fn random_config(rng: &mut ChaCha8Rng) -> SmsState {
        let mut s = SmsState::reference_initial();
        s.eps = nalgebra::Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
        s.q = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        s
    }

    #[test]
    fn coupling_zeroes_momentum() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let s = random_config(&mut rng);
            let (a, blocks, _) = analysis_at(&model, &s);
            let qd = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let base_vel = &a.c_bm * &qd;
            let base_block = DMatrix::from_iterator(6, 6, blocks.base_block().iter().cloned());
            let residual = base_block * base_vel + blocks.coupling_block() * &qd;
            assert!(residual.norm() <= 1e-10);
        }
    }

    #[test]
    fn massless_arm_does_not_move_base() {
        let model = SmsModel::reference().with_link_mass_scale(1e-9).unwrap();
        let (a, _, _) = analysis_at(&model, &SmsState::reference_initial());
        assert!(a.c_bm.norm() <= 1e-6);
    }

    #[test]
    fn planar_rows_vanish() {
        let model = SmsModel::reference();
        let mut s = SmsState::reference_initial();
        s.q = DVector::from_vec(vec![0.5, -0.7, 1.2]);
        let (a, _, _) = analysis_at(&model, &s);
        for row in [2, 3, 4] {
            assert!(a.c_bm.row(row).norm() <= 1e-12);
        }
    }

    #[test]
    fn generalized_jacobian_two_paths() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let s = random_config(&mut rng);
            let (a, _, jac) = analysis_at(&model, &s);
            let qd = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let base = &a.c_bm * &qd;
            let j_b = DMatrix::from_iterator(6, 6, jac.j_b.iter().cloned());
            let via_base = j_b * &base + &jac.j_m * &qd;
            assert!((via_base - a.j_star() * &qd).norm() <= 1e-10);

            let j = &a.jacobian;
            assert!((&j.j_star * &j.j_star_pinv * &j.j_star - &j.j_star).norm() <= 1e-10);
            assert!((&j.j_star_pinv * &j.j_star * &j.j_star_pinv - &j.j_star_pinv).norm() <= 1e-10);

            // Full column rank here, so C_be J* qd recovers C_bm qd.
            let c_be = DMatrix::from_iterator(6, 6, j.c_be.iter().cloned());
            assert!((c_be * (&j.j_star * &qd) - base).norm() <= 1e-10);
        }
    }

    #[test]
    fn svd_factors_are_consistent() {
        let model = SmsModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let s = random_config(&mut rng);
            let (a, _, _) = analysis_at(&model, &s);
            let svd = &a.svd;
            let err = (svd.reconstruct() - &a.c_bm).norm();
            assert!(err <= 1e-12 * a.c_bm.norm().max(1.0));
            assert!((svd.u.transpose() * &svd.u - DMatrix::identity(6, 6)).norm() <= 1e-12);
            assert!((svd.v.transpose() * &svd.v - DMatrix::identity(3, 3)).norm() <= 1e-12);
            assert!(svd.sigma.as_slice().windows(2).all(|w| w[0] >= w[1]));
            for col in svd.v.column_iter() {
                let max = col.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(max > 0.0);
            }
            assert!((0.0..=1.0).contains(&svd.h_norm));
        }
    }

    #[test]
    fn entropy_endpoints() {
        for c in [1e-3, 1.0, 7.5] {
            assert_eq!(normalized_entropy(&[c, c, c], 3).unwrap().0, 1.0);
            assert_eq!(normalized_entropy(&[c, 0.0, 0.0], 3).unwrap().0, 0.0);
        }
        // s = (0.5, 0.25, 0.25): (0.5 ln 2 + 0.5 ln 4) / ln 3.
        let expected = (0.5 * 2f64.ln() + 0.5 * 4f64.ln()) / 3f64.ln();
        let h = normalized_entropy(&[2.0, 1.0, 1.0], 3).unwrap().0;
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.9464).abs() < 1e-4);
        assert_eq!(normalized_entropy(&[0.0, 0.0, 0.0], 3).unwrap(), (0.0, true));
        assert!(normalized_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn entropy_scale_invariant() {
        let model = SmsModel::reference();
        let mut s = SmsState::reference_initial();
        s.q = DVector::from_vec(vec![0.3, 0.9, -0.4]);
        let (a, _, _) = analysis_at(&model, &s);
        for c in [1e-3, 1.0, 1e3] {
            let scaled = svd_metrics(&(&a.c_bm * c)).unwrap();
            assert!((scaled.h_norm - a.h_norm()).abs() <= 1e-12);
        }
    }

    #[test]
    fn coupled_velocity_rules() {
        let v = DMatrix::from_row_slice(3, 3, &[0.0, 0.6, 0.8, 1.0, 0.0, 0.0, 0.0, 0.8, -0.6]);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(coupled_joint_velocity(&e1, &v).unwrap(), v.column(0).into_owned());
        assert_eq!(coupled_joint_velocity(&DVector::zeros(3), &v).unwrap(), DVector::zeros(3));
        let a = DVector::from_vec(vec![0.2, -0.3, 0.1]);
        let b = DVector::from_vec(vec![0.4, 0.5, -0.6]);
        let lhs = coupled_joint_velocity(&(&a + &b), &v).unwrap();
        let rhs = coupled_joint_velocity(&a, &v).unwrap() + coupled_joint_velocity(&b, &v).unwrap();
        assert!((lhs - rhs).norm() < 1e-15);
        assert!(coupled_joint_velocity(&DVector::from_vec(vec![1.5, 0.0, 0.0]), &v).is_err());
    }

    #[test]
    fn assist_metric_cases() {
        let j_star = DMatrix::from_fn(6, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let r_e = Vector3::zeros();
        let r_d = Vector3::new(1.0, 0.0, 0.0);
        let par = assist_metric(&DVector::from_vec(vec![2.0, 0.0, 0.0]), &j_star, &r_e, &r_d, 10.0);
        assert_eq!(par.cos_theta_a, 1.0);
        let anti = assist_metric(&DVector::from_vec(vec![-0.5, 0.0, 0.0]), &j_star, &r_e, &r_d, 10.0);
        assert_eq!(anti.cos_theta_a, -1.0);
        let ortho = assist_metric(&DVector::from_vec(vec![0.0, 1.0, 0.0]), &j_star, &r_e, &r_d, 10.0);
        assert_eq!(ortho.cos_theta_a, 0.0);
        assert!((ortho.c_tilde - 2f64.ln() / 10.0).abs() < 1e-15);
        assert!((ortho.c_tilde - 0.0693).abs() < 1e-4);

        let at_goal = assist_metric(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &j_star, &r_d, &r_d, 10.0);
        assert_eq!(at_goal.status, AssistStatus::AtGoal);
        let still = assist_metric(&DVector::zeros(3), &j_star, &r_e, &r_d, 10.0);
        assert_eq!(still.status, AssistStatus::NoInducedMotion);
        assert_eq!(still.cos_theta_a, 0.0);
    }

    #[test]
    fn softplus_properties() {
        assert!(softplus(1e6, 10.0).is_finite());
        assert!((softplus(1e6, 10.0) - 1e6).abs() < 1e-6);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let c = -1.0 + i as f64 / 100.0;
            let v = softplus(c, 10.0);
            assert!(v > prev && v > 0.0);
            prev = v;
            assert!((softplus(c, 1e3) - c.max(0.0)).abs() <= 1e-2);
        }
    }

    #[test]
    fn assist_metric_scale_invariant() {
        let model = SmsModel::reference();
        let mut s = SmsState::reference_initial();
        s.q = DVector::from_vec(vec![0.2, 0.5, 0.4]);
        let cache = forward_kinematics(&model, &s);
        let (a, _, _) = analysis_at(&model, &s);
        let r_d = cache.r_e + Vector3::new(-0.05, 0.08, 0.0);
        let alpha = DVector::from_vec(vec![0.3, -0.6, 0.2]);
        let base = assist_metric(&(&a.svd.v * &alpha), a.j_star(), &cache.r_e, &r_d, 10.0);
        for c in [1e-3, 0.5, 3.0] {
            let scaled = assist_metric(&(&a.svd.v * (&alpha * c)), a.j_star(), &cache.r_e, &r_d, 10.0);
            assert!((scaled.cos_theta_a - base.cos_theta_a).abs() <= 1e-12);
        }
    }
}

//! Small rotation and linear-algebra helpers shared by the dynamics code.

use nalgebra::{DMatrix, Matrix3, Matrix4x3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};

use crate::error::{Result, SmsError};

/// Cross-product matrix: `skew(r) * v == r.cross(&v)`.
pub fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Quaternion kinematics matrix for `eps = [e1, e2, e3, e4]` (vector part first).
pub fn quat_kinematics_matrix(eps: &Vector4<f64>) -> Matrix4x3<f64> {
    let (e1, e2, e3, e4) = (eps[0], eps[1], eps[2], eps[3]);
    Matrix4x3::new(
        e4, -e3, e2, //
        e3, e4, -e1, //
        -e2, e1, e4, //
        -e1, -e2, -e3,
    )
}

/// Tolerance on `|eps^T eps - 1|` accepted by [`quat_rate`].
pub const QUAT_RATE_NORM_TOL: f64 = 1e-6;

/// `eps_dot = 0.5 * G(eps) * w`, with `w` the body-frame angular velocity.
pub fn quat_rate(eps: &Vector4<f64>, w_body: &Vector3<f64>) -> Result<Vector4<f64>> {
    let defect = (eps.norm_squared() - 1.0).abs();
    if defect > QUAT_RATE_NORM_TOL {
        return Err(SmsError::InvalidState(format!(
            "quaternion norm defect {defect:.3e} exceeds {QUAT_RATE_NORM_TOL:.0e}"
        )));
    }
    Ok(0.5 * quat_kinematics_matrix(eps) * w_body)
}

/// Scalar-last quaternion to a unit quaternion (Hamilton convention, body to inertial).
pub fn unit_quaternion(eps: &Vector4<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(eps[3], eps[0], eps[1], eps[2]))
}

pub fn eps_from_unit_quaternion(uq: &UnitQuaternion<f64>) -> Vector4<f64> {
    let q = uq.quaternion();
    Vector4::new(q.i, q.j, q.k, q.w)
}

/// Body-to-inertial rotation matrix for a scalar-last quaternion.
pub fn rotation_from_eps(eps: &Vector4<f64>) -> Matrix3<f64> {
    unit_quaternion(eps).to_rotation_matrix().into_inner()
}

/// Pre-multiplies the attitude by a rotation of `angle` about the inertial `axis`.
pub fn rotate_eps_inertial(eps: &Vector4<f64>, axis: &Vector3<f64>, angle: f64) -> Vector4<f64> {
    let delta = UnitQuaternion::from_scaled_axis(axis * angle);
    eps_from_unit_quaternion(&(delta * unit_quaternion(eps)))
}

pub fn axis_angle_rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(axis * angle).into_inner()
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Extends `cols` (orthonormal columns of a `rows x k` matrix) to a full orthonormal basis.
pub(crate) fn complete_orthonormal_basis(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = cols.nrows();
    let mut basis: Vec<nalgebra::DVector<f64>> = cols.column_iter().map(|c| c.into_owned()).collect();
    let mut candidate = 0;
    while basis.len() < rows && candidate < rows {
        let mut v = nalgebra::DVector::zeros(rows);
        v[candidate] = 1.0;
        candidate += 1;
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    DMatrix::from_columns(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skew_matches_definition() {
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(s, expected);
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
    }

    #[test]
    fn skew_is_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let v = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let s = skew(&r);
            assert!((s + s.transpose()).norm() == 0.0);
            assert!((s * v - r.cross(&v)).norm() < 1e-14);
        }
    }

    #[test]
    fn quat_rate_identity_spin() {
        let eps = Vector4::new(0.0, 0.0, 0.0, 1.0);
        let rate = quat_rate(&eps, &Vector3::z()).unwrap();
        assert_eq!(rate, Vector4::new(0.0, 0.0, 0.5, 0.0));
        assert_eq!(quat_rate(&eps, &Vector3::zeros()).unwrap(), Vector4::zeros());
    }

    #[test]
    fn quat_rate_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let eps = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let w = Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
            let rate = quat_rate(&eps, &w).unwrap();
            assert!(eps.dot(&rate).abs() <= 1e-12);
        }
    }

    #[test]
    fn quat_rate_rejects_non_unit() {
        let eps = Vector4::new(0.0, 0.0, 0.0, 1.01);
        assert!(matches!(
            quat_rate(&eps, &Vector3::z()),
            Err(SmsError::InvalidState(_))
        ));
    }

    #[test]
    fn quat_rate_matches_body_frame_rotation() {
        // Finite-difference the rotation matrix and compare with R * skew(w_body).
        let eps = Vector4::new(0.1, -0.3, 0.2, 0.9).normalize();
        let w = Vector3::new(0.3, -0.7, 1.1);
        let rate = quat_rate(&eps, &w).unwrap();
        let h = 1e-6;
        let r_plus = rotation_from_eps(&(eps + rate * h));
        let r_minus = rotation_from_eps(&(eps - rate * h));
        let r_dot = (r_plus - r_minus) / (2.0 * h);
        let expected = rotation_from_eps(&eps) * skew(&w);
        assert!((r_dot - expected).norm() < 1e-8);
    }

    #[test]
    fn completes_basis() {
        let cols = DMatrix::from_column_slice(3, 1, &[0.0, 0.6, 0.8]);
        let full = complete_orthonormal_basis(&cols);
        assert_eq!(full.ncols(), 3);
        let gram = full.transpose() * &full;
        assert!((gram - DMatrix::identity(3, 3)).norm() < 1e-12);
    }
}

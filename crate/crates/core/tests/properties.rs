use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use proptest::prelude::*;

use sms_core::control::{saturation, sliding_surface};
use sms_core::coupling::{normalized_entropy, CouplingAnalysis};
use sms_core::dynamics::{inertia_blocks, mass_matrix, momentum};
use sms_core::kinematics::{forward_kinematics, link_jacobians};
use sms_core::math::{quat_rate, rotation_from_eps, skew};
use sms_core::{SmsModel, SmsState};

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-5.0f64..5.0).prop_map(Vector3::from)
}

fn unit_quat() -> impl Strategy<Value = Vector4<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| Vector4::from(v).normalize())
}

fn config() -> impl Strategy<Value = SmsState> {
    (unit_quat(), prop::array::uniform3(-2.5f64..2.5), prop::array::uniform3(-1.0f64..1.0)).prop_map(
        |(eps, q, qd)| {
            let mut s = SmsState::reference_initial();
            s.eps = eps;
            s.q = DVector::from_row_slice(&q);
            s.qd = DVector::from_row_slice(&qd);
            s
        },
    )
}

proptest! {
    #[test]
    fn saturation_is_odd_and_bounded(s in prop::collection::vec(-1.0f64..1.0, 1..6), lambda in 1e-3f64..1.0) {
        let s = DVector::from_vec(s);
        let plus = saturation(&s, lambda);
        let minus = saturation(&(-&s), lambda);
        prop_assert_eq!(&minus, &(-&plus));
        for (v, x) in plus.iter().zip(s.iter()) {
            prop_assert!(v.abs() <= 1.0);
            if x.abs() <= lambda {
                prop_assert!((v - x / lambda).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn sliding_surface_is_linear(
        a in prop::array::uniform3(-1.0f64..1.0),
        b in prop::array::uniform3(-1.0f64..1.0),
        c in prop::array::uniform3(-1.0f64..1.0),
        d in prop::array::uniform3(-1.0f64..1.0),
        k in -3.0f64..3.0,
    ) {
        let gamma = DMatrix::from_diagonal_element(3, 3, 10.0);
        let (qa, qda) = (DVector::from_row_slice(&a), DVector::from_row_slice(&b));
        let (qb, qdb) = (DVector::from_row_slice(&c), DVector::from_row_slice(&d));
        let lhs = sliding_surface(&(&qa * k + &qb), &(&qda * k + &qdb), &gamma);
        let rhs = sliding_surface(&qa, &qda, &gamma) * k + sliding_surface(&qb, &qdb, &gamma);
        prop_assert!((lhs - rhs).norm() <= 1e-12);
    }

    #[test]
    fn entropy_in_unit_interval_and_scale_free(sigma in prop::collection::vec(0.0f64..10.0, 2..7), c in 1e-3f64..1e3) {
        let n = sigma.len();
        let (h, degenerate) = normalized_entropy(&sigma, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        if !degenerate {
            let scaled: Vec<f64> = sigma.iter().map(|s| s * c).collect();
            prop_assert!((normalized_entropy(&scaled, n).unwrap().0 - h).abs() <= 1e-12);
        }
    }

    #[test]
    fn skew_is_cross_product(r in vec3(), v in vec3()) {
        let m = skew(&r);
        prop_assert!((m + m.transpose()).norm() == 0.0);
        prop_assert!((m * v - r.cross(&v)).norm() <= 1e-12);
    }

    #[test]
    fn quaternion_rate_preserves_norm(eps in unit_quat(), w in vec3()) {
        let rate = quat_rate(&eps, &w).unwrap();
        prop_assert!(eps.dot(&rate).abs() <= 1e-12);
    }

    #[test]
    fn rotations_orthonormal(s in config()) {
        let cache = forward_kinematics(&SmsModel::reference(), &s);
        let r = rotation_from_eps(&s.eps);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() <= 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
        prop_assert!((cache.rot_b - r).norm() <= 1e-12);
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite(s in config()) {
        let h = mass_matrix(&SmsModel::reference(), &s);
        prop_assert!((&h - h.transpose()).norm() <= 1e-10 * h.norm());
        prop_assert!(h.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn coupled_base_velocity_has_zero_momentum(s in config()) {
        let model = SmsModel::reference();
        let cache = forward_kinematics(&model, &s);
        let jac = link_jacobians(&cache);
        let blocks = inertia_blocks(&model, &cache, &jac);
        let a = CouplingAnalysis::new(&blocks, &jac).unwrap();
        let base = &a.c_bm * &s.qd;
        let mut moving = s.clone();
        moving.v_b = Vector3::new(base[0], base[1], base[2]);
        moving.w_b = Vector3::new(base[3], base[4], base[5]);
        let (l, h) = momentum(&model, &moving);
        prop_assert!(l.norm() <= 1e-12 && h.norm() <= 1e-12);
        prop_assert!((a.svd.reconstruct() - &a.c_bm).norm() <= 1e-12 * a.c_bm.norm());
        prop_assert!((0.0..=1.0).contains(&a.h_norm()));
    }
}

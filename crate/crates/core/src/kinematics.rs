//! Chain kinematics and the velocity Jacobians of the end effector and each link.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3};

use crate::math::{axis_angle_rotation, rotation_from_eps, skew};
use crate::model::{SmsModel, SmsState};

/// Inertial-frame positions and orientations for one configuration.
#[derive(Debug, Clone)]
pub struct KinematicsCache {
    pub r_b: Vector3<f64>,
    /// Joint positions `p_1..p_n`.
    pub p: Vec<Vector3<f64>>,
    /// Link centre-of-mass positions `r_1..r_n`.
    pub r: Vec<Vector3<f64>>,
    pub r_e: Vector3<f64>,
    pub rot_b: Matrix3<f64>,
    pub rot: Vec<Matrix3<f64>>,
    /// Joint axes in the inertial frame.
    pub axes: Vec<Vector3<f64>>,
}

impl KinematicsCache {
    pub fn dof(&self) -> usize {
        self.p.len()
    }

    /// System centre of mass.
    pub fn center_of_mass(&self, model: &SmsModel) -> Vector3<f64> {
        let weighted = self
            .r
            .iter()
            .zip(model.links())
            .fold(self.r_b * model.base().mass, |acc, (r, l)| acc + r * l.mass);
        weighted / model.total_mass()
    }

    /// Collision check points: joints, link midpoints, then the end effector.
    pub fn check_points(&self) -> Vec<Vector3<f64>> {
        let n = self.dof();
        let mut pts = Vec::with_capacity(2 * n + 1);
        pts.extend(self.p.iter().copied());
        for i in 0..n {
            let outboard = if i + 1 < n { self.p[i + 1] } else { self.r_e };
            pts.push(0.5 * (self.p[i] + outboard));
        }
        pts.push(self.r_e);
        pts
    }
}

pub fn forward_kinematics(model: &SmsModel, state: &SmsState) -> KinematicsCache {
    let n = model.dof();
    let rot_b = rotation_from_eps(&state.eps);
    let mut p = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut rot = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);

    let mut parent_rot = rot_b;
    let mut joint = state.r_b + rot_b * model.mount_offset();
    for i in 0..n {
        let k = model.joint_axes()[i];
        axes.push(parent_rot * k);
        let link_rot = parent_rot * axis_angle_rotation(&k, state.q[i]);
        p.push(joint);
        r.push(joint + link_rot * model.link_com_offset()[i]);
        joint += link_rot * model.link_tip_offset()[i];
        rot.push(link_rot);
        parent_rot = link_rot;
    }

    KinematicsCache {
        r_b: state.r_b,
        p,
        r,
        r_e: joint,
        rot_b,
        rot,
        axes,
    }
}

/// Jacobians of the end effector and of every link centre of mass.
#[derive(Debug, Clone)]
pub struct LinkJacobians {
    pub j_te: DMatrix<f64>,
    pub j_re: DMatrix<f64>,
    /// Per-link translational Jacobians; columns beyond the link index are zero.
    pub j_t: Vec<DMatrix<f64>>,
    pub j_r: Vec<DMatrix<f64>>,
    pub j_b: Matrix6<f64>,
    pub j_m: DMatrix<f64>,
}

pub fn link_jacobians(cache: &KinematicsCache) -> LinkJacobians {
    let n = cache.dof();
    let mut j_te = DMatrix::zeros(3, n);
    let mut j_re = DMatrix::zeros(3, n);
    for j in 0..n {
        let k = cache.axes[j];
        j_te.fixed_view_mut::<3, 1>(0, j)
            .copy_from(&k.cross(&(cache.r_e - cache.p[j])));
        j_re.fixed_view_mut::<3, 1>(0, j).copy_from(&k);
    }

    let mut j_t = Vec::with_capacity(n);
    let mut j_r = Vec::with_capacity(n);
    for i in 0..n {
        let mut jt = DMatrix::zeros(3, n);
        let mut jr = DMatrix::zeros(3, n);
        for j in 0..=i {
            let k = cache.axes[j];
            jt.fixed_view_mut::<3, 1>(0, j)
                .copy_from(&k.cross(&(cache.r[i] - cache.p[j])));
            jr.fixed_view_mut::<3, 1>(0, j).copy_from(&k);
        }
        j_t.push(jt);
        j_r.push(jr);
    }

    let mut j_b = Matrix6::identity();
    j_b.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&skew(&(cache.r_e - cache.r_b)).transpose());

    let mut j_m = DMatrix::zeros(6, n);
    j_m.rows_mut(0, 3).copy_from(&j_te);
    j_m.rows_mut(3, 3).copy_from(&j_re);

    LinkJacobians {
        j_te,
        j_re,
        j_t,
        j_r,
        j_b,
        j_m,
    }
}

//! Physical description of the spacecraft-manipulator system and its state.

use nalgebra::{DVector, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmsError};

/// Allowed `|eps^T eps - 1|` for a state to be considered valid.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// Mass, body-frame inertia tensor and box dimensions (length, width, height) of one rigid body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub dims: Vector3<f64>,
}

impl BodyParams {
    /// Body with principal moments `[ixx, iyy, izz]`.
    pub fn principal(mass: f64, moments: [f64; 3], dims: [f64; 3]) -> Self {
        BodyParams {
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::from(moments)),
            dims: Vector3::from(dims),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(SmsError::validation(
                format!("{field}.mass"),
                format!("must be > 0, got {}", self.mass),
            ));
        }
        let asym = (self.inertia - self.inertia.transpose()).abs().max();
        if asym > 1e-12 * self.inertia.abs().max().max(1.0) {
            return Err(SmsError::validation(format!("{field}.inertia"), "must be symmetric"));
        }
        let eig = self.inertia.symmetric_eigenvalues();
        if eig.iter().any(|&e| !(e > 0.0)) {
            return Err(SmsError::validation(
                format!("{field}.inertia"),
                "must be positive definite",
            ));
        }
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(SmsError::validation(
                format!("{field}.dims"),
                "all dimensions must be > 0",
            ));
        }
        Ok(())
    }
}

/// Immutable model: a free-floating base carrying an `n`-joint serial chain of revolute joints.
///
/// `joint_axes[i]` is expressed in the frame of the parent body (the base for joint 1).
/// Offsets are expressed in the frame of the body they belong to: `mount_offset` in the
/// base frame, `link_com_offset[i]` and `link_tip_offset[i]` in the frame of link `i`,
/// measured from its inboard joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsModel {
    base: BodyParams,
    links: Vec<BodyParams>,
    joint_axes: Vec<Vector3<f64>>,
    mount_offset: Vector3<f64>,
    link_com_offset: Vec<Vector3<f64>>,
    link_tip_offset: Vec<Vector3<f64>>,
}

impl SmsModel {
    pub fn new(
        base: BodyParams,
        links: Vec<BodyParams>,
        joint_axes: Vec<Vector3<f64>>,
        mount_offset: Vector3<f64>,
        link_com_offset: Vec<Vector3<f64>>,
        link_tip_offset: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let n = links.len();
        if n == 0 {
            return Err(SmsError::validation("links", "at least one link is required"));
        }
        base.validate("base")?;
        for (i, link) in links.iter().enumerate() {
            link.validate(&format!("links[{i}]"))?;
        }
        for (name, len) in [
            ("joint_axes", joint_axes.len()),
            ("link_com_offset", link_com_offset.len()),
            ("link_tip_offset", link_tip_offset.len()),
        ] {
            if len != n {
                return Err(SmsError::validation(
                    name,
                    format!("expected {n} entries, got {len}"),
                ));
            }
        }
        for (i, k) in joint_axes.iter().enumerate() {
            if (k.norm() - 1.0).abs() > 1e-9 {
                return Err(SmsError::validation(
                    format!("joint_axes[{i}]"),
                    format!("must be a unit vector, norm is {}", k.norm()),
                ));
            }
        }
        Ok(SmsModel {
            base,
            links,
            joint_axes,
            mount_offset,
            link_com_offset,
            link_tip_offset,
        })
    }

    /// Planar chain: z-axis joints, links extending along their local +x with the centre of
    /// mass at mid-length, mounted at the centre of the base's +x face.
    pub fn planar(base: BodyParams, links: Vec<BodyParams>) -> Result<Self> {
        let n = links.len();
        let mount = Vector3::new(base.dims.x / 2.0, 0.0, 0.0);
        let tips: Vec<_> = links.iter().map(|l| Vector3::new(l.dims.x, 0.0, 0.0)).collect();
        let coms = tips.iter().map(|t| t / 2.0).collect();
        Self::new(base, links, vec![Vector3::z(); n], mount, coms, tips)
    }

    /// Three-link planar system with the reference mass properties.
    pub fn reference() -> Self {
        let base = BodyParams::principal(31.015, [1.1594, 1.1594, 1.1129], [0.464, 0.464, 0.483]);
        let link = BodyParams::principal(0.569, [0.0001, 0.0043, 0.0043], [0.3, 0.03, 0.03]);
        Self::planar(base, vec![link; 3]).expect("reference model is valid")
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn base(&self) -> &BodyParams {
        &self.base
    }

    pub fn links(&self) -> &[BodyParams] {
        &self.links
    }

    pub fn joint_axes(&self) -> &[Vector3<f64>] {
        &self.joint_axes
    }

    pub fn mount_offset(&self) -> &Vector3<f64> {
        &self.mount_offset
    }

    pub fn link_com_offset(&self) -> &[Vector3<f64>] {
        &self.link_com_offset
    }

    pub fn link_tip_offset(&self) -> &[Vector3<f64>] {
        &self.link_tip_offset
    }

    pub fn total_mass(&self) -> f64 {
        self.base.mass + self.links.iter().map(|l| l.mass).sum::<f64>()
    }

    /// Copy with every link's mass and inertia multiplied by `factor`.
    pub fn with_link_mass_scale(&self, factor: f64) -> Result<Self> {
        let mut m = self.clone();
        for l in &mut m.links {
            l.mass *= factor;
            l.inertia *= factor;
        }
        Self::new(
            m.base,
            m.links,
            m.joint_axes,
            m.mount_offset,
            m.link_com_offset,
            m.link_tip_offset,
        )
    }

    /// Copy with the base mass and inertia multiplied by `factor`.
    pub fn with_base_mass_scale(&self, factor: f64) -> Result<Self> {
        let mut m = self.clone();
        m.base.mass *= factor;
        m.base.inertia *= factor;
        Self::new(
            m.base,
            m.links,
            m.joint_axes,
            m.mount_offset,
            m.link_com_offset,
            m.link_tip_offset,
        )
    }
}

/// Position- and velocity-level state. Angular velocity `w_b` is expressed in the inertial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsState {
    pub r_b: Vector3<f64>,
    /// Attitude quaternion `[e1, e2, e3, e4]`, scalar last.
    pub eps: Vector4<f64>,
    pub q: DVector<f64>,
    pub v_b: Vector3<f64>,
    pub w_b: Vector3<f64>,
    pub qd: DVector<f64>,
}

impl SmsState {
    pub fn at_rest(r_b: Vector3<f64>, eps: Vector4<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        SmsState {
            r_b,
            eps,
            q,
            v_b: Vector3::zeros(),
            w_b: Vector3::zeros(),
            qd: DVector::zeros(n),
        }
    }

    /// Initial configuration used by the bundled scenarios: every joint at 1 degree.
    pub fn reference_initial() -> Self {
        Self::at_rest(
            Vector3::new(-0.0356, -0.0006, 0.0),
            Vector4::new(0.0, 0.0, 0.0, 1.0),
            DVector::from_element(3, 1f64.to_radians()),
        )
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self, model: &SmsModel) -> Result<()> {
        let n = model.dof();
        if self.q.len() != n || self.qd.len() != n {
            return Err(SmsError::InvalidState(format!(
                "expected {n} joints, got q: {}, qd: {}",
                self.q.len(),
                self.qd.len()
            )));
        }
        let defect = (self.eps.norm_squared() - 1.0).abs();
        if defect > QUAT_NORM_TOL {
            return Err(SmsError::InvalidState(format!(
                "quaternion norm defect {defect:.3e}"
            )));
        }
        let finite = self.r_b.iter().chain(self.eps.iter()).chain(self.q.iter())
            .chain(self.v_b.iter())
            .chain(self.w_b.iter())
            .chain(self.qd.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(SmsError::InvalidState("non-finite entry".into()));
        }
        Ok(())
    }

    /// Generalized velocity `[v_b; w_b; qd]`.
    pub fn velocity(&self) -> DVector<f64> {
        let n = self.dof();
        let mut nu = DVector::zeros(6 + n);
        nu.fixed_rows_mut::<3>(0).copy_from(&self.v_b);
        nu.fixed_rows_mut::<3>(3).copy_from(&self.w_b);
        nu.rows_mut(6, n).copy_from(&self.qd);
        nu
    }

    pub fn set_velocity(&mut self, nu: &DVector<f64>) {
        let n = self.dof();
        self.v_b = nu.fixed_rows::<3>(0).into_owned();
        self.w_b = nu.fixed_rows::<3>(3).into_owned();
        self.qd = nu.rows(6, n).into_owned();
    }

    pub fn normalize_attitude(&mut self) {
        self.eps /= self.eps.norm();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_total_mass() {
        let m = SmsModel::reference();
        assert!((m.total_mass() - 32.722).abs() < 1e-12);
        assert_eq!(m.dof(), 3);
    }

    #[test]
    fn rejects_bad_link_mass() {
        let mut links = SmsModel::reference().links().to_vec();
        links[0].mass = -1.0;
        let base = SmsModel::reference().base().clone();
        let err = SmsModel::planar(base, links).unwrap_err();
        match err {
            SmsError::Validation { field, .. } => assert_eq!(field, "links[0].mass"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_unit_axis() {
        let m = SmsModel::reference();
        let err = SmsModel::new(
            m.base().clone(),
            m.links().to_vec(),
            vec![Vector3::new(0.0, 0.0, 2.0); 3],
            *m.mount_offset(),
            m.link_com_offset().to_vec(),
            m.link_tip_offset().to_vec(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn state_validation() {
        let m = SmsModel::reference();
        let mut s = SmsState::reference_initial();
        assert!(s.validate(&m).is_ok());
        s.eps[3] = 1.0 + 1e-6;
        assert!(s.validate(&m).is_err());
    }
}

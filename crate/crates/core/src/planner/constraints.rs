//! Joint-limit, self-collision, base-collision and terminal constraints.

use std::fmt;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::KinematicsCache;
use crate::model::SmsModel;

use super::PlannerConfig;

/// Labeled collision check points: joints, link midpoints, end effector.
#[derive(Debug, Clone)]
pub struct CollisionGeometry {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<String>,
    /// Base `(l, w, h)`.
    pub base_box: Vector3<f64>,
}

pub fn collision_points(model: &SmsModel, cache: &KinematicsCache) -> CollisionGeometry {
    let n = model.dof();
    let labels = (1..=n)
        .map(|i| format!("p{i}"))
        .chain((1..=n).map(|i| format!("m{i}")))
        .chain(std::iter::once("ee".to_string()))
        .collect();
    CollisionGeometry {
        points: cache.check_points(),
        labels,
        base_box: model.base().dims,
    }
}

/// Check-point indices rigidly attached to each link.
fn link_members(n: usize) -> Vec<[usize; 3]> {
    (0..n)
        .map(|i| {
            let outboard = if i + 1 < n { i + 1 } else { 2 * n };
            [i, n + i, outboard]
        })
        .collect()
}

/// Point pairs whose separation can change with the joint angles.
pub fn clearance_pairs(n: usize) -> Vec<(usize, usize)> {
    let members = link_members(n);
    let total = 2 * n + 1;
    let mut pairs = Vec::new();
    for i in 0..total {
        for j in (i + 1)..total {
            let rigid = members.iter().any(|m| m.contains(&i) && m.contains(&j));
            if !rigid {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Smallest distance over the non-rigid pairs, with the offending pair.
pub fn min_clearance(points: &[Vector3<f64>], pairs: &[(usize, usize)]) -> (f64, Option<(usize, usize)>) {
    pairs
        .iter()
        .map(|&(i, j)| ((points[i] - points[j]).norm(), Some((i, j))))
        .fold((f64::INFINITY, None), |best, cur| if cur.0 < best.0 { cur } else { best })
}

/// Signed margin of a body-frame offset `f` against the base box.
///
/// Positive means the point is outside. In the default mode the point only has to clear
/// the box along one axis; `literal` requires clearance along every axis.
pub fn base_box_margin(f: &Vector3<f64>, dims: &Vector3<f64>, margin: f64, literal: bool) -> f64 {
    let per_axis = [0, 1, 2].map(|a| f[a].abs() - (dims[a] / 2.0 + margin));
    if literal {
        per_axis.into_iter().fold(f64::INFINITY, f64::min)
    } else {
        per_axis.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Worst base-box margin over check points 2.. (the first joint sits on the base face).
pub fn worst_base_margin(
    cache: &KinematicsCache,
    points: &[Vector3<f64>],
    dims: &Vector3<f64>,
    margin: f64,
    literal: bool,
) -> (f64, Option<usize>) {
    let to_body = cache.rot_b.transpose();
    points
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, d)| (base_box_margin(&(to_body * (d - cache.r_b)), dims, margin, literal), Some(i)))
        .fold((f64::INFINITY, None), |best, cur| if cur.0 < best.0 { cur } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub passed: bool,
    /// `limit - value`; negative when violated.
    pub worst_margin: f64,
    pub worst_index: Option<usize>,
}

impl FamilyResult {
    fn from_margins(margins: impl Iterator<Item = f64>, tol: f64) -> Self {
        let (idx, worst) = margins
            .enumerate()
            .fold((None, f64::INFINITY), |best, (i, m)| if m < best.1 { (Some(i), m) } else { best });
        FamilyResult {
            passed: worst >= -tol,
            worst_margin: worst,
            worst_index: idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub step: usize,
    pub joint_angle: FamilyResult,
    pub joint_velocity: FamilyResult,
    pub joint_acceleration: FamilyResult,
    pub clearance: FamilyResult,
    pub base_box: FamilyResult,
    /// Only evaluated inside the terminal window.
    pub terminal: Option<FamilyResult>,
}

impl ConstraintReport {
    pub fn all_passed(&self) -> bool {
        self.families().all(|(_, f)| f.passed)
    }

    pub fn families(&self) -> impl Iterator<Item = (&'static str, &FamilyResult)> {
        [
            ("joint_angle", Some(&self.joint_angle)),
            ("joint_velocity", Some(&self.joint_velocity)),
            ("joint_acceleration", Some(&self.joint_acceleration)),
            ("clearance", Some(&self.clearance)),
            ("base_box", Some(&self.base_box)),
            ("terminal", self.terminal.as_ref()),
        ]
        .into_iter()
        .filter_map(|(name, f)| f.map(|f| (name, f)))
    }

    pub fn violated(&self) -> Vec<&'static str> {
        self.families().filter(|(_, f)| !f.passed).map(|(n, _)| n).collect()
    }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}:", self.step)?;
        for (name, fam) in self.families() {
            write!(
                f,
                " {name}={} ({:+.3e})",
                if fam.passed { "ok" } else { "VIOLATED" },
                fam.worst_margin
            )?;
        }
        Ok(())
    }
}

/// First step index inside the terminal window, `ceil((1 - fraction) N)`.
pub fn terminal_start(n_steps: usize, fraction: f64) -> usize {
    ((1.0 - fraction) * n_steps as f64 - 1e-9).ceil() as usize
}

/// Absolute slack when comparing against a limit.
pub const LIMIT_TOL: f64 = 1e-9;

/// Joint quantities at one grid point.
pub struct JointSample<'a> {
    pub q: &'a DVector<f64>,
    pub qd: &'a DVector<f64>,
    pub qdd: &'a DVector<f64>,
}

/// Evaluates every constraint family at grid point `step` of an `n_steps` plan.
pub fn check_constraints(
    model: &SmsModel,
    cache: &KinematicsCache,
    joints: &JointSample<'_>,
    r_d: &Vector3<f64>,
    step: usize,
    n_steps: usize,
    config: &PlannerConfig,
) -> ConstraintReport {
    let n = model.dof();
    let limit = |v: &DVector<f64>, max: &DVector<f64>| {
        FamilyResult::from_margins((0..n).map(|i| max[i] - v[i].abs()), LIMIT_TOL)
    };
    let geometry = collision_points(model, cache);
    let pairs = clearance_pairs(n);
    let (dmin, _) = min_clearance(&geometry.points, &pairs);
    let clearance = FamilyResult {
        passed: dmin >= config.d_safe - LIMIT_TOL,
        worst_margin: dmin - config.d_safe,
        worst_index: None,
    };
    let (box_margin, box_idx) = worst_base_margin(
        cache,
        &geometry.points,
        &geometry.base_box,
        config.base_margin,
        config.literal_box_constraint,
    );
    let base_box = FamilyResult {
        passed: box_margin > 0.0,
        worst_margin: box_margin,
        worst_index: box_idx,
    };
    let terminal = (step >= terminal_start(n_steps, config.terminal_window_fraction)).then(|| {
        let err = (r_d - cache.r_e).norm();
        FamilyResult {
            passed: err <= config.r_th,
            worst_margin: config.r_th - err,
            worst_index: None,
        }
    });
    ConstraintReport {
        step,
        joint_angle: limit(joints.q, &config.q_max),
        joint_velocity: limit(joints.qd, &config.qd_max),
        joint_acceleration: limit(joints.qdd, &config.qdd_max),
        clearance,
        base_box,
        terminal,
    }
}
